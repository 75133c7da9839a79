"""Cascaded two-view point/grid fusion network.

One fusion block lifts per-point features through a small MLP, scatters
them into the top-down and spherical grids, runs an encoder/decoder FCN
over each grid, gathers the results back onto the points, and fuses the
three branches with two MLP layers. Blocks repeat with fresh parameters;
a single linear head maps the last block's output to per-class logits.

Parameters live in a flat name->tensor registry created lazily on the
first forward pass, so the registry order is a pure function of the
config. Checkpoints serialize that registry to a flat binary file keyed
by a digest of the config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, no_grad
from .pointcloud import PointCloud
from .projection import (
    BEV,
    GridSpec,
    g2p_bilinear,
    p2g_scatter_max,
    point_input_features,
    project,
)

REFERENCE_STAGE_CHANNELS = (64, 32, 64, 128, 128, 96, 64, 64)


@dataclass(frozen=True)
class FcnConfig:
    """Per-view grid network schedule."""

    stage_channels: tuple
    downsample_height: bool
    input_channels: int
    use_ddb: bool = True
    use_afpn: bool = True
    per_channel_gate: bool = False

    def __post_init__(self):
        if len(self.stage_channels) != 8:
            raise ValueError("stage_channels must list exactly 8 stages")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage_channels must be positive")


@dataclass(frozen=True)
class ModelConfig:
    bev_spec: GridSpec
    rv_spec: GridSpec
    num_classes: int
    num_blocks: int = 2
    block_in_channels: tuple = (9, 64)
    block_out_channels: tuple = (64, 96)
    mlp_channels: int = 64
    stage_channels: tuple = REFERENCE_STAGE_CHANNELS
    use_point_branch: bool = True
    use_point_fusion: bool = True
    use_ddb: bool = True
    use_afpn: bool = True
    per_channel_gate: bool = False

    def __post_init__(self):
        if len(self.block_in_channels) != self.num_blocks:
            raise ValueError("block_in_channels length must equal num_blocks")
        if len(self.block_out_channels) != self.num_blocks:
            raise ValueError("block_out_channels length must equal num_blocks")
        for i in range(1, self.num_blocks):
            if self.block_in_channels[i] != self.block_out_channels[i - 1]:
                raise ValueError("block i input channels must chain from block i-1 output")
        if not self.use_point_fusion and self.num_blocks != 1:
            raise ValueError("per-view head averaging supports a single block only")
        if self.num_classes <= 1:
            raise ValueError("need at least two classes")

    def fcn_config(self, kind: str) -> FcnConfig:
        return FcnConfig(
            stage_channels=self.stage_channels,
            downsample_height=(kind == BEV),
            input_channels=self.mlp_channels,
            use_ddb=self.use_ddb,
            use_afpn=self.use_afpn,
            per_channel_gate=self.per_channel_gate,
        )


def full_scale_config(num_classes: int = 19, **overrides) -> ModelConfig:
    """The reference configuration: 600x600 top-down grid over a 100 m
    square, 2048x64 range grid, stages 64,32,64,128,128,96,64,64."""
    kw = dict(
        bev_spec=GridSpec.bev(600, 600, -50.0, -50.0, 50.0, 50.0),
        rv_spec=GridSpec.rv(2048, 64),
        num_classes=num_classes,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def desk_config(num_classes: int = 5, **overrides) -> ModelConfig:
    """Reduced widths and grid sizes for CPU-scale experiments."""
    kw = dict(
        bev_spec=GridSpec.bev(64, 64, -50.0, -50.0, 50.0, 50.0),
        rv_spec=GridSpec.rv(256, 16),
        num_classes=num_classes,
        block_in_channels=(9, 32),
        block_out_channels=(32, 48),
        mlp_channels=32,
        stage_channels=(32, 16, 32, 64, 64, 48, 32, 32),
    )
    kw.update(overrides)
    return ModelConfig(**kw)


class ModelParams:
    """Flat named-parameter registry plus batch-norm running state.

    Creation order is the forward-pass request order, which is fixed for a
    given config, so serialization and gradient iteration are stable.
    """

    def __init__(self, seed: int = 0):
        self.tensors: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.frozen = False
        self._rng = np.random.default_rng(np.random.PCG64(seed))

    def parameter(self, name: str, shape: tuple, init: str = "kaiming", fan_in: int = 0) -> Tensor:
        if name in self.tensors:
            t = self.tensors[name]
            if t.data.shape != tuple(shape):
                raise ValueError(f"parameter {name}: shape {t.data.shape} != {shape}")
            return t
        if self.frozen:
            raise KeyError(f"unknown parameter {name} requested after init")
        if init == "kaiming":
            bound = np.sqrt(6.0 / max(fan_in, 1))
            data = self._rng.uniform(-bound, bound, shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t

    def bn_state(self, name: str, channels: int) -> BatchNormState:
        if name not in self.bn_states:
            if self.frozen:
                raise KeyError(f"unknown batchnorm state {name} requested after init")
            self.bn_states[name] = BatchNormState(channels)
        return self.bn_states[name]

    def freeze(self):
        self.frozen = True
        self._rng = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None


class _Net:
    """Forward-pass helper binding a registry and a training flag."""

    def __init__(self, params: ModelParams, training: bool):
        self.p = params
        self.training = training

    def bn(self, name, x, invariant=False):
        ch = x.data.shape[-1]
        g = self.p.parameter(f"{name}.g", (ch,), init="ones")
        b = self.p.parameter(f"{name}.b", (ch,), init="zeros")
        st = self.p.bn_state(name, ch)
        return ad.batchnorm(x, g, b, st, self.training, invariant=invariant)

    def conv(self, name, x, cout, k=3, stride=1, padding=None, bn=True, act=True):
        cin = x.data.shape[-1]
        w = self.p.parameter(f"{name}.w", (k, k, cin, cout), fan_in=k * k * cin)
        b = self.p.parameter(f"{name}.b", (cout,), init="zeros")
        pad = k // 2 if padding is None else padding
        y = ad.conv2d(x, w, b, stride=stride, padding=pad)
        if bn:
            y = self.bn(f"{name}.bn", y)
        if act:
            y = ad.relu(y)
        return y

    def linear(self, name, x, cout, bn=True, act=True):
        cin = x.data.shape[-1]
        w = self.p.parameter(f"{name}.w", (cin, cout), fan_in=cin)
        b = self.p.parameter(f"{name}.b", (cout,), init="zeros")
        y = ad.linear(x, w, b)
        if bn:
            # point-axis statistics must not depend on point order
            y = self.bn(f"{name}.bn", y, invariant=True)
        if act:
            y = ad.relu(y)
        return y


def _gate_blend(gate: Tensor, low: Tensor, up: Tensor) -> Tensor:
    """out = gate*low + (1-gate)*up with a (H,W,1) or (H,W,C) gate."""
    a = gate.data
    out = a * low.data + (1.0 - a) * up.data

    def bw(g):
        da = g * (low.data - up.data)
        if a.shape[-1] == 1:
            da = da.sum(axis=-1, keepdims=True)
        return (da, g * a, g * (1.0 - a))

    return ad.record_op(out, (gate, low, up), bw)


def dual_downsample(net: _Net, name: str, x: Tensor, cout: int, downsample_height: bool,
                    use_ddb: bool = True) -> Tensor:
    """Halve resolution by parallel stride-2 conv and maxpool+1x1 conv.

    The spherical view keeps its height, so stride and pool cover width
    only there. With use_ddb off this is a plain strided conv.
    """
    h, w = x.data.shape[:2]
    stride = (2, 2) if downsample_height else (1, 2)
    if (downsample_height and h % 2) or w % 2:
        raise ValueError(f"dual_downsample: dims {(h, w)} not even along strided axes")
    if not use_ddb:
        return net.conv(f"{name}.a", x, cout, k=3, stride=stride)
    conv_branch = net.conv(f"{name}.a", x, cout, k=3, stride=stride, bn=False, act=False)
    pooled = ad.maxpool2d(x, stride)
    pool_branch = net.conv(f"{name}.b", pooled, cout, k=1, bn=False, act=False)
    y = ad.add(conv_branch, pool_branch)
    return ad.relu(net.bn(f"{name}.bn", y))


def residual_block(net: _Net, name: str, x: Tensor, cout: int) -> Tensor:
    cin = x.data.shape[-1]
    h = net.conv(f"{name}.c1", x, cout)
    h = net.conv(f"{name}.c2", h, cout, act=False)
    s = x if cin == cout else net.conv(f"{name}.sc", x, cout, k=1, act=False)
    return ad.relu(ad.add(h, s))


def attention_fpn(net: _Net, name: str, low: Tensor, high: Tensor, cout: int,
                  factor, use_afpn: bool = True, per_channel_gate: bool = False) -> Tensor:
    """Blend an upsampled coarse map into a fine map with a learned gate.

    Both maps are first projected to ``cout``; the sigmoid gate weights sum
    to one per pixel. With use_afpn off the maps are concatenated and
    merged by a 1x1 conv instead.
    """
    low2 = net.conv(f"{name}.low", low, cout, k=1)
    high2 = net.conv(f"{name}.high", high, cout, k=1)
    up = ad.upsample2d(high2, factor)
    if up.data.shape[:2] != low2.data.shape[:2]:
        raise ValueError(
            f"attention_fpn: upsampled {up.data.shape[:2]} != low {low2.data.shape[:2]}"
        )
    if not use_afpn:
        return net.conv(f"{name}.merge", ad.concat([low2, up], axis=2), cout, k=1)
    gate_ch = cout if per_channel_gate else 1
    raw = net.conv(f"{name}.gate", ad.concat([low2, up], axis=2), gate_ch, k=3,
                   bn=False, act=False)
    return _gate_blend(ad.sigmoid(raw), low2, up)


def fcn_forward(net: _Net, prefix: str, grid: Tensor, cfg: FcnConfig) -> Tensor:
    """Encoder/decoder over one (H, W, Cin) grid; returns (H, W, ch[-1]).

    Three downsampling stages need the strided dims divisible by 8; the
    caller pads before and crops after if its grid is not.
    """
    h, w = grid.data.shape[:2]
    if (cfg.downsample_height and h % 8) or w % 8:
        raise ValueError(f"fcn_forward: grid {(h, w)} not divisible by 8 on strided axes")
    ch = cfg.stage_channels
    factor = (2, 2) if cfg.downsample_height else (1, 2)

    s = net.conv(f"{prefix}.stem0", grid, ch[0])
    s = net.conv(f"{prefix}.stem1", s, ch[1])
    e1 = dual_downsample(net, f"{prefix}.ds1", s, ch[2], cfg.downsample_height, cfg.use_ddb)
    e1 = residual_block(net, f"{prefix}.res1", e1, ch[2])
    e2 = dual_downsample(net, f"{prefix}.ds2", e1, ch[3], cfg.downsample_height, cfg.use_ddb)
    e2 = residual_block(net, f"{prefix}.res2", e2, ch[3])
    e3 = dual_downsample(net, f"{prefix}.ds3", e2, ch[4], cfg.downsample_height, cfg.use_ddb)
    e3 = residual_block(net, f"{prefix}.res3", e3, ch[4])
    d2 = attention_fpn(net, f"{prefix}.fpn2", e2, e3, ch[5], factor,
                       cfg.use_afpn, cfg.per_channel_gate)
    d1 = attention_fpn(net, f"{prefix}.fpn1", e1, d2, ch[6], factor,
                       cfg.use_afpn, cfg.per_channel_gate)
    d0 = attention_fpn(net, f"{prefix}.fpn0", s, d1, ch[7], factor,
                       cfg.use_afpn, cfg.per_channel_gate)
    return d0


def point_fusion(net: _Net, name: str, parts: list, cout: int) -> Tensor:
    """Concatenate per-point branches and mix with two MLP layers."""
    n0 = parts[0].data.shape[0]
    if any(p.data.shape[0] != n0 for p in parts):
        raise ValueError("point_fusion: branch row counts differ")
    x = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    x = net.linear(f"{name}.m0", x, cout)
    return net.linear(f"{name}.m1", x, cout)


def _grid_pad(spec: GridSpec, downsample_height: bool):
    ph = (-spec.height) % 8 if downsample_height else 0
    pw = (-spec.width) % 8
    return ph, pw


def _view_branch(net, bname, view, mlp_feats, index, cfg):
    """P2G -> padded FCN -> crop -> G2P for one view."""
    spec = index.spec
    fcn_cfg = cfg.fcn_config(spec.kind)
    grid, _rec = p2g_scatter_max(mlp_feats, index)
    ph, pw = _grid_pad(spec, fcn_cfg.downsample_height)
    if ph or pw:
        grid = ad.pad2d(grid, (0, ph, 0, pw))
    out = fcn_forward(net, f"{bname}.{view}", grid, fcn_cfg)
    if ph or pw:
        out = ad.crop2d(out, (0, ph, 0, pw))
    return g2p_bilinear(out, index)


def pg_block(net: _Net, bname: str, point_feats: Tensor, bev_index, rv_index,
             cfg: ModelConfig, block_idx: int) -> Tensor:
    """One fusion block: MLP, both grid branches, fuse back on points."""
    expected = cfg.block_in_channels[block_idx]
    if point_feats.data.shape[1] != expected:
        raise ValueError(
            f"block {block_idx}: input width {point_feats.data.shape[1]} != {expected}"
        )
    mlp = net.linear(f"{bname}.mlp", point_feats, cfg.mlp_channels)
    bev_pts = _view_branch(net, bname, "bev", mlp, bev_index, cfg)
    rv_pts = _view_branch(net, bname, "rv", mlp, rv_index, cfg)
    parts = ([mlp] if cfg.use_point_branch else []) + [bev_pts, rv_pts]
    return point_fusion(net, f"{bname}.fuse", parts, cfg.block_out_channels[block_idx])


def _block_views(net, bname, point_feats, bev_index, rv_index, cfg):
    """The no-fusion ablation: run one block's branches, return them raw."""
    mlp = net.linear(f"{bname}.mlp", point_feats, cfg.mlp_channels)
    bev_pts = _view_branch(net, bname, "bev", mlp, bev_index, cfg)
    rv_pts = _view_branch(net, bname, "rv", mlp, rv_index, cfg)
    return bev_pts, rv_pts


def model_forward(cloud: PointCloud, cfg: ModelConfig, params: ModelParams,
                  training: bool = False) -> Tensor:
    """Per-point class logits, shape (N, num_classes)."""
    bev_index = project(cloud, cfg.bev_spec)
    rv_index = project(cloud, cfg.rv_spec)
    x = point_input_features(cloud, bev_index, rv_index)
    net = _Net(params, training)
    if not cfg.use_point_fusion:
        bev_pts, rv_pts = _block_views(net, "b0", x, bev_index, rv_index, cfg)
        lb = net.linear("head_bev", bev_pts, cfg.num_classes, bn=False, act=False)
        lr = net.linear("head_rv", rv_pts, cfg.num_classes, bn=False, act=False)
        return ad.affine(ad.add(lb, lr), scale=0.5)
    for i in range(cfg.num_blocks):
        x = pg_block(net, f"b{i}", x, bev_index, rv_index, cfg, i)
    return net.linear("head", x, cfg.num_classes, bn=False, act=False)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Create the full registry by tracing one forward pass on a stub cloud."""
    params = ModelParams(seed)
    xyz = np.array([[1.0, 0.5, 0.2], [-2.0, 1.0, -0.5], [3.0, -1.5, 0.1], [0.5, 2.0, -1.0]])
    stub = PointCloud(xyz=xyz, intensity=np.full(4, 0.5), labels=None)
    with no_grad():
        model_forward(stub, cfg, params, training=False)
    params.freeze()
    return params


# checkpoint container: magic, version, config digest, meta JSON, tensors

_MAGIC = b"PGCK"
_VERSION = 1


def config_digest(cfg: ModelConfig) -> bytes:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def write_blob(path, digest: bytes, meta: dict, arrays) -> None:
    """Serialize named float arrays with a config digest and JSON meta.

    float64 arrays keep their width; everything else is stored float32.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(digest)
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            wide = np.asarray(arr).dtype == np.float64
            a = np.ascontiguousarray(arr, dtype="<f8" if wide else "<f4")
            f.write(struct.pack("<B", 1 if wide else 0))
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def read_blob(path):
    """Inverse of :func:`write_blob`; returns (digest, meta, arrays)."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        digest = f.read(32)
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen).decode())
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (wide,) = struct.unpack("<B", f.read(1))
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            dt = "<f8" if wide else "<f4"
            width = 8 if wide else 4
            data = np.frombuffer(f.read(width * size), dtype=dt).reshape(shape)
            arrays[name] = data.copy()  # frombuffer views are read-only
    return digest, meta, arrays


def _registry_arrays(params: ModelParams) -> dict:
    arrays = {}
    for name, t in params.tensors.items():
        arrays[name] = t.data
    for name, st in params.bn_states.items():
        arrays[f"{name}.running_mean"] = st.running_mean
        arrays[f"{name}.running_var"] = st.running_var
    return arrays


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, meta: dict | None = None):
    write_blob(path, config_digest(cfg), meta or {}, _registry_arrays(params))


def load_checkpoint(path, cfg: ModelConfig, seed: int = 0):
    """Restore parameters for ``cfg``; the stored digest must match."""
    digest, meta, arrays = read_blob(path)
    if digest != config_digest(cfg):
        raise ValueError(f"{path}: checkpoint was written for a different config")
    params = init_params(cfg, seed)
    expected = _registry_arrays(params)
    if set(arrays) != set(expected):
        raise ValueError(f"{path}: tensor names do not match the config's registry")
    for name, t in params.tensors.items():
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        t.data = np.ascontiguousarray(arrays[name], dtype=t.data.dtype)
    for name, st in params.bn_states.items():
        st.running_mean = arrays[f"{name}.running_mean"].astype(np.float32)
        st.running_var = arrays[f"{name}.running_var"].astype(np.float32)
    return params, meta
