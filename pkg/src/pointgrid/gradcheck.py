"""Central finite-difference checks for every differentiable operation.

Each registered case builds float64 inputs placed away from kinks and
sort ties, computes analytic gradients via the tape, then compares them
against central differences coordinate by coordinate. The same registry
backs the test suite and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import BatchNormState, Tensor, backward, no_grad, precision, reset_graph
from .losses import ClassWeights, consistency_loss, lovasz_softmax_loss, total_loss, wce_loss
from .projection import GridSpec, ProjectionIndex, g2p_bilinear, p2g_scatter_max, project_bev

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckCase:
    name: str
    build: callable  # rng -> (inputs: list[Tensor], fn: () -> scalar Tensor)
    coord_cap: int = 48


def max_rel_error(fn, inputs, rng, h=DEFAULT_H, coord_cap=48):
    """Largest relative gap between tape gradients and central differences.

    ``fn`` must be a pure function of the (captured) inputs returning a
    scalar tensor; it is re-evaluated under no_grad for the differences.
    """
    reset_graph()
    for t in inputs:
        t.grad = None
    loss = fn()
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("gradcheck needs a scalar function")
    backward(loss)
    grads = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    reset_graph()

    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        size = flat.size
        if size <= coord_cap:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coord_cap, replace=False)
        for i in coords:
            keep = flat[i]
            with no_grad():
                flat[i] = keep + h
                f_plus = float(fn().item())
                flat[i] = keep - h
                f_minus = float(fn().item())
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(g.reshape(-1)[i])
            denom = max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.08):
    x = rng.uniform(-1.0, 1.0, shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return Tensor(x, requires_grad=True)


def _sum(x):
    return ad.sum_all(x)


class _Probe:
    """Random linear functional so every output coordinate matters.

    The checker re-evaluates the case closure for its finite differences,
    so the weights are drawn once on first use and then reused; a fresh
    draw per call would compare two different functions.
    """

    def __init__(self, rng):
        self.rng = rng
        self.w = None

    def __call__(self, x):
        if self.w is None:
            self.w = self.rng.normal(size=x.data.shape)
        return ad.sum_all(ad.mul(x, Tensor(self.w)))


def _cases_elementwise(add):
    def build_add(rng):
        a, b = _t(rng, (5, 3)), _t(rng, (5, 3))
        return [a, b], lambda: _sum(ad.mul(ad.add(a, b), ad.sub(a, b)))

    add("add_sub_mul", build_add)

    def build_affine(rng):
        x = _t(rng, (4, 6))
        scale = rng.normal(size=(4, 6))
        return [x], lambda: _sum(ad.affine(x, scale=scale, shift=0.3))

    add("affine", build_affine)

    def build_relu(rng):
        x = _away_from_zero(rng, (7, 4))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.relu(x))

    add("relu", build_relu)

    def build_sigmoid(rng):
        x = _t(rng, (6, 3), -3, 3)
        probe = _Probe(rng)
        return [x], lambda: probe(ad.sigmoid(x))

    add("sigmoid", build_sigmoid)

    def build_log(rng):
        x = _t(rng, (5, 2), 0.2, 2.0)
        probe = _Probe(rng)
        return [x], lambda: probe(ad.log(x))

    add("log", build_log)

    def build_abs(rng):
        x = _away_from_zero(rng, (6, 2))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.absolute(x))

    add("absolute", build_abs)

    def build_mean(rng):
        x = _t(rng, (9,))
        return [x], lambda: ad.mean_all(ad.mul(x, x))

    add("mean_all", build_mean)


def _cases_linear(add):
    def build_matmul(rng):
        a, b = _t(rng, (4, 3)), _t(rng, (3, 5))
        probe = _Probe(rng)
        return [a, b], lambda: probe(ad.matmul(a, b))

    add("matmul", build_matmul)

    def build_linear(rng):
        x, w, b = _t(rng, (6, 4)), _t(rng, (4, 3)), _t(rng, (3,))
        probe = _Probe(rng)
        return [x, w, b], lambda: probe(ad.linear(x, w, b))

    add("linear", build_linear)

    def build_concat(rng):
        a, b = _t(rng, (3, 2)), _t(rng, (3, 4))
        probe = _Probe(rng)
        return [a, b], lambda: probe(ad.concat([a, b], axis=1))

    add("concat", build_concat)

    def build_take(rng):
        x = _t(rng, (5, 4))
        idx = rng.integers(0, 20, size=9)
        probe = _Probe(rng)
        return [x], lambda: probe(ad.take(x, idx))

    add("take", build_take)

    def build_reshape(rng):
        x = _t(rng, (4, 6))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.reshape(x, (3, 8)))

    add("reshape", build_reshape)

    def build_pad_crop(rng):
        x = _t(rng, (4, 5, 2))
        probe = _Probe(rng)
        return [x], lambda: probe(
            ad.crop2d(ad.pad2d(x, (1, 2, 0, 1)), (0, 1, 1, 0))
        )

    add("pad_crop", build_pad_crop)


def _cases_spatial(add):
    def build_conv(rng):
        x, w, b = _t(rng, (6, 6, 3)), _t(rng, (3, 3, 3, 2)), _t(rng, (2,))
        probe = _Probe(rng)
        return [x, w, b], lambda: probe(ad.conv2d(x, w, b, stride=1, padding=1))

    add("conv2d", build_conv)

    def build_conv_stride(rng):
        x, w, b = _t(rng, (6, 8, 2)), _t(rng, (3, 3, 2, 3)), _t(rng, (3,))
        probe = _Probe(rng)
        return [x, w, b], lambda: probe(
            ad.conv2d(x, w, b, stride=(1, 2), padding=1)
        )

    add("conv2d_wide_stride", build_conv_stride)

    def build_conv_s2(rng):
        x, w, b = _t(rng, (8, 8, 2)), _t(rng, (3, 3, 2, 2)), _t(rng, (2,))
        probe = _Probe(rng)
        return [x, w, b], lambda: probe(ad.conv2d(x, w, b, stride=2, padding=1))

    add("conv2d_stride2", build_conv_s2)

    def _gapped_windows(rng, shape, k):
        # keep each pooling window's top two entries separated
        while True:
            x = rng.uniform(-1, 1, shape)
            h, w, c = shape
            kh, kw = k
            win = (
                x.reshape(h // kh, kh, w // kw, kw, c)
                .transpose(0, 2, 1, 3, 4)
                .reshape(-1, kh * kw, c)
            )
            if kh * kw == 1:
                return Tensor(x, requires_grad=True)
            top2 = np.sort(win, axis=1)[:, -2:, :]
            if np.min(top2[:, 1] - top2[:, 0]) > 1e-3:
                return Tensor(x, requires_grad=True)

    def build_maxpool(rng):
        x = _gapped_windows(rng, (4, 6, 2), (2, 2))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.maxpool2d(x, 2))

    add("maxpool2d", build_maxpool)

    def build_maxpool_wide(rng):
        x = _gapped_windows(rng, (4, 6, 2), (1, 2))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.maxpool2d(x, (1, 2)))

    add("maxpool2d_wide", build_maxpool_wide)

    def build_upsample(rng):
        x = _t(rng, (3, 4, 2))
        probe = _Probe(rng)
        return [x], lambda: probe(ad.upsample2d(x, (2, 2)))

    add("upsample2d", build_upsample)


def _cases_norm(add):
    def build_bn_train(rng):
        x, g, b = _t(rng, (12, 4)), _t(rng, (4,), 0.5, 1.5), _t(rng, (4,))
        probe = _Probe(rng)
        def fn():
            state = BatchNormState(4)
            return probe(ad.batchnorm(x, g, b, state, training=True))
        return [x, g, b], fn

    add("batchnorm_train", build_bn_train)

    def build_bn_invariant(rng):
        x, g, b = _t(rng, (10, 3)), _t(rng, (3,), 0.5, 1.5), _t(rng, (3,))
        probe = _Probe(rng)
        def fn():
            state = BatchNormState(3)
            return probe(
                ad.batchnorm(x, g, b, state, training=True, invariant=True)
            )
        return [x, g, b], fn

    add("batchnorm_train_invariant", build_bn_invariant)

    def build_bn_eval(rng):
        x, g, b = _t(rng, (8, 3)), _t(rng, (3,), 0.5, 1.5), _t(rng, (3,))
        state = BatchNormState(3)
        state.running_mean = rng.normal(size=3).astype(np.float32)
        state.running_var = rng.uniform(0.5, 2.0, 3).astype(np.float32)
        probe = _Probe(rng)
        return [x, g, b], lambda: probe(
            ad.batchnorm(x, g, b, state, training=False)
        )

    add("batchnorm_eval", build_bn_eval)

    def build_softmax(rng):
        x = _t(rng, (6, 4), -2, 2)
        probe = _Probe(rng)
        return [x], lambda: probe(ad.softmax(x, axis=1))

    add("softmax", build_softmax)

    def build_log_softmax(rng):
        x = _t(rng, (6, 4), -2, 2)
        probe = _Probe(rng)
        return [x], lambda: probe(ad.log_softmax(x, axis=1))

    add("log_softmax", build_log_softmax)


def _scatter_instance(rng, n, h, w, c):
    """Random in-and-around-grid points with clear per-cell winners."""
    spec = GridSpec.bev(w, h, 0.0, 0.0, float(w), float(h))
    while True:
        xyz = np.column_stack([
            rng.uniform(-1.0, w + 1.0, n),
            rng.uniform(-1.0, h + 1.0, n),
            rng.normal(size=n),
        ])
        index = project_bev(xyz, spec)
        feats = rng.uniform(-1, 1, (n, c))
        rows, cols = index.cells()
        ok = True
        for ch in range(c):
            seen = {}
            for k in np.flatnonzero(index.in_range):
                key = (rows[k], cols[k], ch)
                seen.setdefault(key, []).append(feats[k, ch])
            for vals in seen.values():
                if len(vals) > 1:
                    top = np.sort(vals)[-2:]
                    if top[1] - top[0] < 1e-3:
                        ok = False
        if ok:
            return spec, index, feats


def _cases_projection(add):
    def build_scatter(rng):
        spec, index, feats = _scatter_instance(rng, 14, 4, 5, 2)
        ft = Tensor(feats, requires_grad=True)
        w = rng.normal(size=(spec.height, spec.width, 2))

        def fn():
            grid, _rec = p2g_scatter_max(ft, index, spec)
            return ad.sum_all(ad.mul(grid, Tensor(w)))

        return [ft], fn

    add("p2g_scatter_max", build_scatter)

    def build_gather(rng):
        spec = GridSpec.bev(5, 4, 0.0, 0.0, 5.0, 4.0)
        xyz = np.column_stack([
            rng.uniform(-0.5, 5.5, 10),
            rng.uniform(-0.5, 4.5, 10),
            rng.normal(size=10),
        ])
        index = project_bev(xyz, spec)
        grid = _t(rng, (4, 5, 3))
        w = rng.normal(size=(10, 3))
        return [grid], lambda: ad.sum_all(
            ad.mul(g2p_bilinear(grid, index, spec), Tensor(w))
        )

    add("g2p_bilinear", build_gather)


def _cases_losses(add):
    def build_wce(rng):
        logits = _t(rng, (12, 4), -2, 2)
        labels = rng.integers(0, 4, 12).astype(np.int64)
        labels[rng.integers(0, 12)] = 255  # one ignored point
        weights = ClassWeights.from_frequencies(rng.uniform(0.05, 0.5, 4))
        return [logits], lambda: wce_loss(logits, labels, weights)

    add("wce_loss", build_wce)

    def build_lovasz(rng):
        n, c = 7, 3
        while True:
            logits = rng.normal(size=(n, c))
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            labels = rng.integers(0, c, n).astype(np.int64)
            # reject instances whose per-class sorted errors nearly tie
            clear = True
            for cls in np.unique(labels):
                err = np.where(labels == cls, 1 - probs[:, cls], probs[:, cls])
                gaps = np.diff(np.sort(err))
                if gaps.size and gaps.min() < 1e-3:
                    clear = False
            if clear:
                break
        pt = Tensor(probs, requires_grad=True)
        return [pt], lambda: lovasz_softmax_loss(pt, labels)

    add("lovasz_softmax", build_lovasz)

    def build_consistency(rng):
        a, b = _t(rng, (9, 4), 0.0, 1.0), _t(rng, (9, 4), 0.0, 1.0)
        # keep the two sets separated so |a-b| stays off its kink
        b.data += np.where(b.data >= a.data, 0.05, -0.05)
        return [a, b], lambda: consistency_loss(a, b)

    add("consistency_loss", build_consistency)

    def build_total(rng):
        w, l, t = _t(rng, ()), _t(rng, ()), _t(rng, ())
        return [w, l, t], lambda: total_loss(w, l, t)

    add("total_loss", build_total)


def _cases_network(add):
    def build_gate(rng):
        a = _t(rng, (3, 4, 1), 0.1, 0.9)
        low, up = _t(rng, (3, 4, 2)), _t(rng, (3, 4, 2))
        probe = _Probe(rng)
        return [a, low, up], lambda: probe(net._gate_blend(a, low, up))

    add("gate_blend", build_gate)

    def build_afpn(rng):
        params = net.ModelParams(seed=int(rng.integers(1 << 30)))
        helper = net._Net(params, training=True)
        low = _t(rng, (4, 4, 3))
        high = _t(rng, (2, 2, 5))
        probe = _Probe(rng)

        def fn():
            return probe(
                net.attention_fpn(helper, "chk", low, high, 4, (2, 2))
            )

        fn()  # materialize parameters, then expose them to the checker
        params.freeze()
        return [low, high] + list(params.tensors.values()), fn

    add("attention_fpn", build_afpn)

    def build_ddb(rng):
        params = net.ModelParams(seed=int(rng.integers(1 << 30)))
        helper = net._Net(params, training=True)
        x = _t(rng, (4, 6, 3))
        probe = _Probe(rng)

        def fn():
            return probe(net.dual_downsample(helper, "chk", x, 4, True))

        fn()
        params.freeze()
        return [x] + list(params.tensors.values()), fn

    add("dual_downsample", build_ddb)


def cases() -> list:
    out = []

    def add(name, build, coord_cap=48):
        out.append(CheckCase(name=name, build=build, coord_cap=coord_cap))

    _cases_elementwise(add)
    _cases_linear(add)
    _cases_spatial(add)
    _cases_norm(add)
    _cases_projection(add)
    _cases_losses(add)
    _cases_network(add)
    return out


def run_case(case: CheckCase, seed: int = 0, h=DEFAULT_H, tol=DEFAULT_TOL) -> dict:
    with precision("float64"):
        rng = np.random.default_rng(
            np.random.PCG64(seed ^ zlib.crc32(case.name.encode()))
        )
        inputs, fn = case.build(rng)
        err = max_rel_error(fn, inputs, rng, h=h, coord_cap=case.coord_cap)
    return {"name": case.name, "max_rel": err, "passed": bool(err < tol)}


def run_all(seed: int = 0, h=DEFAULT_H, tol=DEFAULT_TOL) -> list:
    return [run_case(c, seed=seed, h=h, tol=tol) for c in cases()]
