"""Command-line harness: train, eval, project, coverage, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from . import synth
from .autodiff import Tensor
from .config import RunConfig
from .metrics import report
from .network import init_params, load_checkpoint
from .pointcloud import PointCloud, load_scan
from .projection import coverage_stats, p2g_scatter_max, project
from .train import evaluate, load_corpus, train


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM, min/max normalized; constant images come out black."""
    img = np.asarray(image, dtype=np.float64)
    span = np.ptp(img) if img.size else 0.0
    scaled = np.zeros_like(img) if span == 0.0 else (img - img.min()) / span * 255.0
    data = scaled.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
        cfg.set("data", "synthetic_seed", args.seed)
    if getattr(args, "out", None):
        cfg.set("train", "out_dir", args.out)
    return cfg


def _load_cloud(args, cfg) -> PointCloud:
    if args.scan:
        return load_scan(args.scan)
    return synth.synth_scene(cfg.get("data", "synthetic_seed"))


def _coverage_payload(cloud, cfg) -> dict:
    cov = coverage_stats(cloud, cfg.bev_spec(), cfg.rv_spec())
    return {"points": cloud.n, "empty": cloud.n == 0, **cov}


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = train(cfg, resume=args.resume, echo=print)
    print(f"epochs_run={result.epochs_run}")
    print(f"final_miou={result.final_miou:.6f}")
    print(f"best_checkpoint={result.best_checkpoint}")
    print(f"metrics_log={result.log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    corpus, class_names = load_corpus(cfg)
    model_cfg = cfg.model_config()
    if args.checkpoint:
        params, _meta = load_checkpoint(args.checkpoint, model_cfg)
    else:
        params = init_params(model_cfg, cfg.get("train", "seed"))
    res, cm = evaluate(corpus, model_cfg, params, tta=args.tta)
    print(report(cm, class_names))
    print(f"tta={'on' if args.tta else 'off'}")
    return 0


def _dump_view(cloud, spec, channel_values, out_dir, stem) -> None:
    index = project(cloud, spec)
    feats = Tensor(channel_values.reshape(-1, 1))
    grid, record = p2g_scatter_max(feats, index)
    occupancy = (record.argmax[:, :, 0] >= 0).astype(np.float64)
    write_pgm(os.path.join(out_dir, f"{stem}_occupancy.pgm"), occupancy)
    write_pgm(os.path.join(out_dir, f"{stem}_max.pgm"), grid.data[:, :, 0])


def cmd_project(args) -> int:
    cfg = _config_from_args(args)
    cloud = _load_cloud(args, cfg)
    out_dir = cfg.get("train", "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    r = np.sqrt(np.sum(cloud.xyz**2, axis=1))
    _dump_view(cloud, cfg.bev_spec(), cloud.xyz[:, 2], out_dir, "bev")
    _dump_view(cloud, cfg.rv_spec(), r, out_dir, "rv")
    print(json.dumps(_coverage_payload(cloud, cfg), sort_keys=True))
    return 0


def cmd_coverage(args) -> int:
    cfg = _config_from_args(args)
    cloud = _load_cloud(args, cfg)
    print(json.dumps(_coverage_payload(cloud, cfg), sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(seed=args.seed or 0)
    width = max(len(r["name"]) for r in results)
    failed = 0
    for r in results:
        mark = "ok" if r["passed"] else "FAIL"
        print(f"{r['name']:<{width}}  {r['max_rel']:.3e}  {mark}")
        failed += 0 if r["passed"] else 1
    print(f"checked={len(results)} failed={failed}")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pointgrid",
        description="Point cloud segmentation via two-view grid fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scan=False, checkpoint=False, tta=False, resume=False):
        p.add_argument("--config", help="run configuration file (INI)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if scan:
            p.add_argument("--scan", help="scan file; defaults to a synthetic scene")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint path")
        if tta:
            p.add_argument("--tta", action="store_true",
                           help="average predictions over the four flips")
        if resume:
            p.add_argument("--resume", help="training state file to continue from")

    common(sub.add_parser("train", help="train on the configured corpus"), resume=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True, tta=True)
    common(sub.add_parser("project", help="dump view images and coverage"), scan=True)
    common(sub.add_parser("coverage", help="print view coverage fractions"), scan=True)
    common(sub.add_parser("gradcheck", help="finite-difference check all ops"))

    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "project": cmd_project,
        "coverage": cmd_coverage,
        "gradcheck": cmd_gradcheck,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
