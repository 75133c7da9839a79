"""Training loop, evaluation, and resumable run state.

Single scan per step, SGD with momentum, learning rate decayed by a
fixed factor on an epoch schedule. Each step runs the augmented pass for
the supervised terms and, when the consistency term is on, a second pass
on the raw points. The metrics log is plain key=value text with no
timestamps, so identical seeded runs produce byte-identical logs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import backward, no_grad, reset_graph
from .config import RunConfig
from .losses import ClassWeights, consistency_loss, lovasz_softmax_loss, total_loss, wce_loss
from .metrics import ConfusionMatrix, IouResult, miou
from .network import (
    ModelParams,
    config_digest,
    init_params,
    model_forward,
    read_blob,
    save_checkpoint,
    write_blob,
)
from .pointcloud import augment, compute_frequencies, load_label_map, load_labels, load_scan, tta_variants, write_scan
from . import synth


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    forward_passes: int = 0
    best_miou: float = -1.0
    velocities: dict = field(default_factory=dict)
    rng: np.random.Generator = None


@dataclass
class TrainResult:
    final_miou: float
    best_miou: float
    epochs_run: int
    stopped_early: bool
    out_dir: str
    log_path: str
    best_checkpoint: str
    last_checkpoint: str
    state_path: str
    forward_passes: int


def lr_at(epoch: int, lr0: float, decay: float, every: int) -> float:
    return lr0 * decay ** (epoch // every)


def load_corpus(run_cfg: RunConfig):
    """Returns (clouds, class_names) for the configured data source."""
    d = run_cfg.values["data"]
    if d["source"] == "synthetic":
        spec = synth.SynthSpec(symmetric=d["synthetic_symmetric"])
        clouds = synth.synth_corpus(d["synthetic_seed"], d["synthetic_scenes"], spec)
        return clouds, list(synth.CLASS_NAMES)
    if d["source"] != "scans":
        raise ValueError(f"config: unknown data source {d['source']!r}")
    if not d["scan_dir"]:
        raise ValueError("config: scan_dir required for source=scans")
    label_map = load_label_map(d["label_map"]) if d["label_map"] else None
    clouds = []
    names = sorted(
        f for f in os.listdir(d["scan_dir"]) if f.endswith(".bin")
    )
    for name in names:
        cloud = load_scan(os.path.join(d["scan_dir"], name))
        label_path = os.path.join(d["scan_dir"], name[:-4] + ".label")
        if label_map is not None and os.path.exists(label_path):
            labels, _unknown = load_labels(label_path, label_map, cloud.n)
            cloud.labels = labels
        clouds.append(cloud)
    if not clouds:
        raise ValueError(f"no .bin scans found in {d['scan_dir']}")
    class_names = label_map.class_names if label_map else None
    return clouds, class_names


def class_weights_for(run_cfg: RunConfig, corpus) -> ClassWeights:
    num_classes = run_cfg.values["model"]["num_classes"]
    freq = run_cfg.class_frequencies()
    if freq is None:
        labeled = [c.labels for c in corpus if c.labels is not None]
        if not labeled:
            return ClassWeights.uniform(num_classes)
        freq = compute_frequencies(labeled, num_classes)
    return ClassWeights.from_frequencies(freq, epsilon=run_cfg.values["loss"]["epsilon"])


def predict_probs(cloud, model_cfg, params, tta: bool = False) -> np.ndarray:
    """Per-point class probabilities; averaged over 4 flips when tta."""
    variants = tta_variants(cloud) if tta else [cloud]
    acc = None
    with no_grad():
        for v in variants:
            probs = ad.softmax(model_forward(v, model_cfg, params, training=False), axis=1)
            acc = probs.data.copy() if acc is None else acc + probs.data
    return acc / len(variants)


def evaluate(corpus, model_cfg, params, tta: bool = False):
    """Confusion-matrix mIoU of argmax predictions over a corpus."""
    cm = ConfusionMatrix(model_cfg.num_classes)
    for cloud in corpus:
        if cloud.labels is None:
            continue
        probs = predict_probs(cloud, model_cfg, params, tta)
        cm.accumulate(np.argmax(probs, axis=1), cloud.labels)
    return miou(cm), cm


def _nan_abort(out_dir, cloud, diag):
    scene_path = os.path.join(out_dir, "nan_scene.bin")
    write_scan(scene_path, cloud)
    diag_path = os.path.join(out_dir, "nan_diagnostic.json")
    with open(diag_path, "w") as f:
        json.dump(diag, f, indent=2, sort_keys=True)
    raise RuntimeError(
        f"non-finite loss at epoch {diag['epoch']} step {diag['step']}; "
        f"offending scene dumped to {scene_path}"
    )


def _train_scene(cloud, model_cfg, params, weights, aug_spec, rng, use_tc, state):
    """Forward/backward for one scan; gradients accumulate into params."""
    reset_graph()
    aug_cloud, _tf = augment(cloud, aug_spec, rng)
    logits_aug = model_forward(aug_cloud, model_cfg, params, training=True)
    state.forward_passes += 1
    wce = wce_loss(logits_aug, aug_cloud.labels, weights)
    ls = lovasz_softmax_loss(ad.softmax(logits_aug, axis=1), aug_cloud.labels)
    tc = None
    if use_tc:
        logits_raw = model_forward(cloud, model_cfg, params, training=True)
        state.forward_passes += 1
        tc = consistency_loss(
            ad.softmax(logits_raw, axis=1), ad.softmax(logits_aug, axis=1)
        )
    loss = total_loss(wce, ls, tc)
    values = {
        "loss": float(loss.item()),
        "wce": float(wce.item()),
        "ls": float(ls.item()),
        "tc": float(tc.item()) if tc is not None else 0.0,
    }
    backward(loss)
    reset_graph()
    return values


def _apply_update(params: ModelParams, state: TrainState, lr: float, momentum: float):
    for name, t in params.tensors.items():
        v = state.velocities[name]
        v *= momentum
        if t.grad is not None:
            v += t.grad
        t.data -= (lr * v).astype(t.data.dtype)
    params.zero_grads()


def _state_arrays(params: ModelParams, state: TrainState) -> dict:
    arrays = {}
    for name, t in params.tensors.items():
        arrays[name] = t.data
    for name, st in params.bn_states.items():
        arrays[f"{name}.running_mean"] = st.running_mean
        arrays[f"{name}.running_var"] = st.running_var
    for name, v in state.velocities.items():
        arrays[f"opt.{name}"] = v
    return arrays


def save_state(path, model_cfg, params: ModelParams, state: TrainState):
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "forward_passes": state.forward_passes,
        "best_miou": state.best_miou,
        "rng": state.rng.bit_generator.state,
    }
    write_blob(path, config_digest(model_cfg), meta, _state_arrays(params, state))


def load_state(path, model_cfg, params: ModelParams) -> TrainState:
    digest, meta, arrays = read_blob(path)
    if digest != config_digest(model_cfg):
        raise ValueError(f"{path}: state was written for a different config")
    state = TrainState()
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state.forward_passes = int(meta["forward_passes"])
    state.best_miou = float(meta["best_miou"])
    rng = np.random.default_rng(np.random.PCG64(0))
    rng.bit_generator.state = meta["rng"]
    state.rng = rng
    for name, t in params.tensors.items():
        t.data = np.ascontiguousarray(arrays[name], dtype=t.data.dtype)
        state.velocities[name] = arrays[f"opt.{name}"].astype(t.data.dtype)
    for name, st in params.bn_states.items():
        st.running_mean = arrays[f"{name}.running_mean"].astype(np.float32)
        st.running_var = arrays[f"{name}.running_var"].astype(np.float32)
    return state


def train(run_cfg: RunConfig, resume: str | None = None, echo=None) -> TrainResult:
    """Run (or continue) a training job; returns summary paths and scores."""
    out_dir = run_cfg.values["train"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    corpus, _names = load_corpus(run_cfg)
    weights = class_weights_for(run_cfg, corpus)
    model_cfg = run_cfg.model_config()
    opt = run_cfg.values["optim"]
    tr = run_cfg.values["train"]
    use_tc = run_cfg.values["loss"]["use_consistency"]
    aug_spec = run_cfg.augmentation_spec()

    params = init_params(model_cfg, tr["seed"])
    state = TrainState()
    log_mode = "w"
    if resume:
        state = load_state(resume, model_cfg, params)
        log_mode = "a"
    else:
        state.rng = np.random.default_rng(np.random.PCG64(tr["seed"]))
        state.velocities = {
            name: np.zeros_like(t.data) for name, t in params.tensors.items()
        }

    log_path = os.path.join(out_dir, "metrics.txt")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    state_path = os.path.join(out_dir, "state.bin")

    train_clouds = [c for c in corpus if c.labels is not None]
    if not train_clouds:
        raise ValueError("training requires labeled scans")

    stopped = False
    last_miou = float("nan")
    log = open(log_path, log_mode)
    try:
        epoch = state.epoch
        while epoch < tr["epochs"]:
            lr = lr_at(epoch, opt["lr0"], opt["lr_decay"], opt["decay_every"])
            state.lr = lr
            order = state.rng.permutation(len(train_clouds))
            sums = {"loss": 0.0, "wce": 0.0, "ls": 0.0, "tc": 0.0}
            pending = 0
            for pos, idx in enumerate(order):
                cloud = train_clouds[int(idx)]
                vals = _train_scene(
                    cloud, model_cfg, params, weights, aug_spec, state.rng, use_tc, state
                )
                if not np.isfinite(vals["loss"]):
                    _nan_abort(out_dir, cloud, {
                        "epoch": epoch, "step": state.step, "lr": lr, **vals,
                    })
                for k in sums:
                    sums[k] += vals[k]
                state.step += 1
                pending += 1
                if pending == opt["grad_accum"] or pos == len(order) - 1:
                    _apply_update(params, state, lr, opt["momentum"])
                    pending = 0
            n = len(order)
            do_eval = (epoch + 1) % tr["eval_every"] == 0 or epoch + 1 == tr["epochs"]
            if do_eval:
                res, _cm = evaluate(train_clouds, model_cfg, params)
                last_miou = res.mean
                miou_txt = f"{res.mean:.6f}"
            else:
                miou_txt = "na"
            log.write(
                f"epoch={epoch} lr={lr:.6f} loss={sums['loss'] / n:.6f} "
                f"wce={sums['wce'] / n:.6f} ls={sums['ls'] / n:.6f} "
                f"tc={sums['tc'] / n:.6f} miou={miou_txt} "
                f"forward_passes={state.forward_passes}\n"
            )
            log.flush()
            if echo:
                echo(f"epoch {epoch}: loss {sums['loss'] / n:.4f} miou {miou_txt}")
            epoch += 1
            state.epoch = epoch
            save_checkpoint(last_path, model_cfg, params, meta={"epoch": epoch})
            save_state(state_path, model_cfg, params, state)
            if do_eval and last_miou > state.best_miou:
                state.best_miou = last_miou
                save_checkpoint(best_path, model_cfg, params, meta={"epoch": epoch})
            if do_eval and last_miou >= tr["stop_miou"]:
                log.write(f"stop=target_reached epoch={epoch} miou={last_miou:.6f}\n")
                stopped = True
                break
    finally:
        log.close()
    return TrainResult(
        final_miou=last_miou,
        best_miou=state.best_miou,
        epochs_run=state.epoch,
        stopped_early=stopped,
        out_dir=out_dir,
        log_path=log_path,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        state_path=state_path,
        forward_passes=state.forward_passes,
    )
