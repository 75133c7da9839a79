"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the operator set the segmentation network needs: dense
elementwise math, 2D convolution / pooling / upsampling / batch norm in
channel-last layout, row-wise linear maps, softmax variants, gather, and
the two custom-gradient projection primitives registered from
:mod:`pointgrid.projection`.

Layout convention: grid tensors are ``(H, W, C)``, point tensors are
``(N, C)``. Arithmetic runs in a process-wide default dtype -- float32
for training, float64 for gradient-check mode (see :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(name: str) -> None:
    """Set the process-wide dtype for newly created tensors ('float32'/'float64')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype, e.g. ``with precision('float64'):``."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense n-dimensional array participating in reverse-mode differentiation.

    ``data`` is a contiguous numpy array; ``grad`` is populated by
    :func:`backward` for every reachable tensor with ``requires_grad``.
    Tensors are immutable once produced except for grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # asarray keeps 0-d scalars 0-d; ascontiguousarray would promote them
        self.data = np.asarray(data, dtype=dtype or _default_dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Wrap an already-typed array without a cast (internal op outputs)."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


class Node:
    """One executed operation: output, inputs, and its backward rule."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of executed operations for one forward pass.

    Execution order is a topological order, so backward traverses the
    record in reverse. The active graph is cleared between training steps.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_graph = Graph()


def active_graph() -> Graph:
    return _graph


def reset_graph() -> None:
    """Drop all recorded nodes; call once per training step."""
    _graph.clear()


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Produce an op output tensor and record its backward rule.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    entry of ``inputs``. Recording is skipped when no input needs grad or
    grad mode is off; this is the extension point custom ops use.
    """
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = _wrap(out_data, req)
    if req:
        _graph.record(Node(out, tuple(inputs), backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation seeded with d(loss)/d(loss)=1."""
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(_graph.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is not None and t.requires_grad:
                _accumulate(t, gi)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return record_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def affine(x: Tensor, scale=1.0, shift=0.0) -> Tensor:
    """Elementwise ``scale * x + shift`` with constant (non-differentiated) coefficients."""
    scale = np.asarray(scale, dtype=x.data.dtype)
    shift = np.asarray(shift, dtype=x.data.dtype)
    if np.broadcast_shapes(x.data.shape, scale.shape, shift.shape) != x.data.shape:
        raise ValueError("affine: coefficients may not broadcast x up in shape")
    out = scale * x.data + shift
    return record_op(out, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    # maximum (not where) so a non-finite activation surfaces in the loss
    mask = x.data > 0
    return record_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for overflow-free exp
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    return record_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    return record_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return record_op(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),))


def mean_all(x: Tensor) -> Tensor:
    return affine(sum_all(x), scale=1.0 / max(x.size, 1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    return record_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: ``(N, Cin) @ (Cin, Cout) + (Cout,)``."""
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"linear: shape mismatch x={x.data.shape} w={w.data.shape} b={b.data.shape}"
        )
    out = x.data @ w.data + b.data
    return record_op(
        out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0))
    )


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    ref = ts[0].data.shape
    for t in ts[1:]:
        got = t.data.shape
        if len(got) != len(ref) or any(
            g != r for i, (g, r) in enumerate(zip(got, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: non-axis dims differ, {ref} vs {got}")
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def take(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather ``x.flat[indices]``; backward scatter-adds into the source."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    out = x.data.reshape(-1)[idx]

    def bw(g):
        dx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(dx, idx, g)
        return (dx.reshape(x.data.shape),)

    return record_op(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record_op(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),)
    )


# ---------------------------------------------------------------------------
# spatial ops (channel-last, no batch dimension)
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad an ``(H, W, C)`` tensor by (top, bottom, left, right)."""
    t, b, l, r = pads
    out = np.pad(x.data, ((t, b), (l, r), (0, 0)))
    H, W = x.data.shape[:2]
    return record_op(
        out, (x,), lambda g: (np.ascontiguousarray(g[t : t + H, l : l + W]),)
    )


def crop2d(x: Tensor, crops: tuple[int, int, int, int]) -> Tensor:
    """Inverse of :func:`pad2d`: drop (top, bottom, left, right) border rows/cols."""
    t, b, l, r = crops
    H, W = x.data.shape[:2]
    out = np.ascontiguousarray(x.data[t : H - b, l : W - r])
    return record_op(
        out, (x,), lambda g: (np.pad(g, ((t, b), (l, r), (0, 0))),)
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """2D cross-correlation on an ``(H, W, Cin)`` input.

    ``w`` is ``(k, k, Cin, Cout)``, ``b`` is ``(Cout,)``. Output spatial dims
    follow ``floor((H + 2p - k) / stride) + 1`` per axis.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    k = w.data.shape[0]
    if w.data.ndim != 4 or w.data.shape[1] != k:
        raise ValueError(f"conv2d: weight must be (k,k,Cin,Cout), got {w.data.shape}")
    if x.data.shape[2] != w.data.shape[2]:
        raise ValueError(
            f"conv2d: input channels {x.data.shape[2]} != weight Cin {w.data.shape[2]}"
        )
    cin, cout = w.data.shape[2], w.data.shape[3]
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    Hp, Wp = xp.shape[:2]
    Ho = (Hp - k) // sh + 1
    Wo = (Wp - k) // sw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: empty output for input {x.data.shape}, k={k}")
    # im2col: one BLAS matmul instead of a window loop
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::sh, ::sw]  # (Ho, Wo, Cin, k, k)
    patches = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(
        Ho * Wo, k * k * cin
    )
    wmat = w.data.reshape(k * k * cin, cout)
    out = (patches @ wmat + b.data).reshape(Ho, Wo, cout)

    def bw(g):
        gm = g.reshape(Ho * Wo, cout)
        dw = (patches.T @ gm).reshape(w.data.shape)
        db = gm.sum(axis=0)
        dcol = (gm @ wmat.T).reshape(Ho, Wo, k, k, cin)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[di : di + Ho * sh : sh, dj : dj + Wo * sw : sw] += dcol[:, :, di, dj]
        dx = dxp[ph : Hp - ph, pw : Wp - pw] if (ph or pw) else dxp
        return (np.ascontiguousarray(dx), dw, db)

    return record_op(out, (x, w, b), bw)


def maxpool2d(x: Tensor, k=2) -> Tensor:
    """Non-overlapping max pooling with window == stride.

    Backward routes the gradient to the argmax cell of each window only;
    ties break toward the lowest flat index inside the window.
    """
    kh, kw = _pair(k)
    H, W, C = x.data.shape
    if H % kh or W % kw:
        raise ValueError(f"maxpool2d: dims {(H, W)} not divisible by window {(kh, kw)}")
    Ho, Wo = H // kh, W // kw
    windows = (
        x.data.reshape(Ho, kh, Wo, kw, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(Ho, Wo, kh * kw, C)
    )
    arg = windows.argmax(axis=2)  # first max wins: lowest flat index
    out = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        dwin = np.zeros((Ho, Wo, kh * kw, C), dtype=x.data.dtype)
        np.put_along_axis(dwin, arg[:, :, None, :], g[:, :, None, :], axis=2)
        dx = dwin.reshape(Ho, Wo, kh, kw, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
        return (np.ascontiguousarray(dx),)

    return record_op(np.ascontiguousarray(out), (x,), bw)


def upsample2d(x: Tensor, factor=2) -> Tensor:
    """Nearest-neighbor upsampling; backward sums each input cell's replicas."""
    fh, fw = _pair(factor)
    H, W, C = x.data.shape
    out = np.repeat(np.repeat(x.data, fh, axis=0), fw, axis=1)

    def bw(g):
        return (g.reshape(H, fh, W, fw, C).sum(axis=(1, 3)),)

    return record_op(out, (x,), bw)


def _invariant_moments(flat: np.ndarray):
    """Per-channel mean/var via sorted summation: permutation-order invariant."""
    n = flat.shape[0]
    mean = np.sort(flat, axis=0).sum(axis=0) / n
    centered = flat - mean
    var = np.sort(centered * centered, axis=0).sum(axis=0) / n
    return mean, var


class BatchNormState:
    """Running statistics for one batch-norm layer (inference path state).

    Kept in float32 so checkpoints round-trip exactly.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    invariant: bool = False,
) -> Tensor:
    """Per-channel standardization over all leading axes, then affine.

    Training mode uses batch statistics and updates ``state`` in place;
    inference mode reads the running statistics. ``invariant=True`` computes
    batch moments with order-invariant sorted sums so that point-axis layers
    stay exactly permutation-equivariant.
    """
    C = x.data.shape[-1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ValueError(f"batchnorm: affine params must have shape ({C},)")
    flat = x.data.reshape(-1, C)
    n = flat.shape[0]
    eps = state.eps
    if training and n == 0:
        training = False  # empty point set: fall back to running stats, no update
    if training:
        if invariant:
            mean, var = _invariant_moments(flat)
            mean = mean.astype(x.data.dtype)
            var = var.astype(x.data.dtype)
        else:
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
        m = state.momentum
        state.running_mean = (
            (1 - m) * state.running_mean + m * mean
        ).astype(np.float32)
        state.running_var = (
            (1 - m) * state.running_var + m * var
        ).astype(np.float32)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mean) * inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.data.shape)

    def bw(g):
        gf = g.reshape(-1, C)
        dgamma = (gf * xhat).sum(axis=0)
        dbeta = gf.sum(axis=0)
        dxhat = gf * gamma.data
        if training:
            dx = (
                inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
        else:
            dx = dxhat * inv_std
        return (dx.reshape(x.data.shape), dgamma, dbeta)

    return record_op(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rows along ``axis`` sum to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return record_op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record_op(y, (x,), bw)
