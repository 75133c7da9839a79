"""Point/grid transfer: view transforms, scatter-max, and bilinear gather.

Two fixed views are supported: a top-down metric grid over a rectangular
x/y window, and a spherical range view over azimuth and zenith angle.
Continuous grid coordinates use the half-open convention 0 <= u < W,
0 <= v < H; a point belongs to cell (floor(v), floor(u)). Grids are
stored (H, W, C) with v along rows and u along columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record_op

BEV = "bev"
RV = "rv"


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one view grid."""

    kind: str
    width: int
    height: int
    x_min: float = 0.0
    y_min: float = 0.0
    x_max: float = 0.0
    y_max: float = 0.0
    f_up: float = 0.0
    f_down: float = 0.0

    def __post_init__(self):
        if self.kind not in (BEV, RV):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.kind == BEV and not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("bev bounds must satisfy x_max > x_min and y_max > y_min")
        if self.kind == RV and not self.f_up + self.f_down > 0:
            raise ValueError("rv field of view must have f_up + f_down > 0")

    @classmethod
    def bev(cls, width, height, x_min, y_min, x_max, y_max):
        return cls(BEV, width, height, x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)

    @classmethod
    def rv(cls, width, height, f_up=np.deg2rad(3.0), f_down=np.deg2rad(25.0)):
        # default vertical field of view matches common 64-beam sensors
        return cls(RV, width, height, f_up=f_up, f_down=f_down)

    @property
    def f(self) -> float:
        return self.f_up + self.f_down


@dataclass
class ProjectionIndex:
    """Continuous grid coordinates of every point in one view.

    ``u``/``v`` are float64; out-of-view points keep finite (but out of
    bounds) coordinates so integer cell math stays safe. The spherical
    extras ``r``, ``theta``, ``phi`` are set for range view only.
    """

    spec: GridSpec
    u: np.ndarray
    v: np.ndarray
    in_range: np.ndarray
    r: np.ndarray = None
    theta: np.ndarray = None
    phi: np.ndarray = None

    @property
    def n(self) -> int:
        return self.u.shape[0]

    def cells(self):
        """(row, col) int64 cell coordinates; valid only where in_range."""
        return (
            np.floor(self.v).astype(np.int64),
            np.floor(self.u).astype(np.int64),
        )


@dataclass
class ScatterRecord:
    """Winning point index per (row, col, channel); -1 marks empty."""

    argmax: np.ndarray


def _xyz_of(cloud) -> np.ndarray:
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    return np.asarray(xyz, dtype=np.float64)


def project_bev(cloud, spec: GridSpec) -> ProjectionIndex:
    """Map x/y to the top-down grid: linear in metric position."""
    if spec.kind != BEV:
        raise ValueError("project_bev needs a bev GridSpec")
    xyz = _xyz_of(cloud)
    u = (xyz[:, 0] - spec.x_min) / (spec.x_max - spec.x_min) * spec.width
    v = (xyz[:, 1] - spec.y_min) / (spec.y_max - spec.y_min) * spec.height
    in_range = (u >= 0) & (u < spec.width) & (v >= 0) & (v < spec.height)
    return ProjectionIndex(spec=spec, u=u, v=v, in_range=in_range)


def project_rv(cloud, spec: GridSpec) -> ProjectionIndex:
    """Map points to the spherical view; r=0 points are masked out."""
    if spec.kind != RV:
        raise ValueError("project_rv needs an rv GridSpec")
    xyz = _xyz_of(cloud)
    r = np.sqrt(np.sum(xyz * xyz, axis=1))
    ok = r > 0
    theta = np.zeros_like(r)
    np.divide(xyz[:, 2], r, out=theta, where=ok)
    theta = np.arcsin(np.clip(theta, -1.0, 1.0))
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    u = 0.5 * (1.0 - phi / np.pi) * spec.width
    # row 0 is the highest beam (theta = f_up), row H the lowest (-f_down)
    v = (1.0 - (theta + spec.f_down) / spec.f) * spec.height
    # park degenerate points safely outside the half-open bounds
    u = np.where(ok, u, -1.0)
    v = np.where(ok, v, -1.0)
    in_range = ok & (u >= 0) & (u < spec.width) & (v >= 0) & (v < spec.height)
    return ProjectionIndex(spec=spec, u=u, v=v, in_range=in_range, r=r, theta=theta, phi=phi)


def project(cloud, spec: GridSpec) -> ProjectionIndex:
    return project_bev(cloud, spec) if spec.kind == BEV else project_rv(cloud, spec)


def p2g_scatter_max(features: Tensor, index: ProjectionIndex, spec: GridSpec | None = None):
    """Scatter point features to their cells, keeping the per-channel max.

    Returns ``(grid, record)`` where grid is (H, W, C) with empty cells at
    zero and record holds the winning point per cell/channel (ties go to
    the lowest original point index). The backward pass routes each cell
    gradient to its winner only; out-of-view points get zero gradient.
    """
    spec = spec or index.spec
    feats = features.data
    if feats.ndim != 2 or feats.shape[0] != index.n:
        raise ValueError("features must be (N, C) matching the projection index")
    n, c = feats.shape
    h, w = spec.height, spec.width

    rows, cols = index.cells()
    sel = np.flatnonzero(index.in_range)
    cell_flat = rows[sel] * w + cols[sel]
    # one flat slot per (cell, channel)
    keys = (cell_flat[:, None] * c + np.arange(c)[None, :]).ravel()
    vals = feats[sel].ravel()

    best = np.full(h * w * c, -np.inf, dtype=feats.dtype)
    np.maximum.at(best, keys, vals)

    winner = np.full(h * w * c, n, dtype=np.int64)
    is_max = vals == best[keys]
    point_ids = np.repeat(sel, c)
    np.minimum.at(winner, keys[is_max], point_ids[is_max])

    empty = winner == n
    best[empty] = 0.0
    winner[empty] = -1
    grid = best.reshape(h, w, c)
    record = ScatterRecord(argmax=winner.reshape(h, w, c))

    def backward(grad):
        gp = np.zeros_like(feats)
        flat_w = record.argmax.ravel()
        valid = flat_w >= 0
        chan = np.tile(np.arange(c), h * w)
        np.add.at(gp, (flat_w[valid], chan[valid]), grad.ravel()[valid])
        return (gp,)

    return record_op(grid, (features,), backward), record


def _neighbor_terms(index: ProjectionIndex, spec: GridSpec):
    """Per-point neighbor cells and weights for the four-cell interpolation."""
    u, v = index.u, index.v
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -10.0)
    v = np.where(finite, v, -10.0)
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    terms = []
    for di in (0, 1):
        for dj in (0, 1):
            col = i0 + di
            row = j0 + dj
            wgt = (1.0 - np.abs(fu - di)) * (1.0 - np.abs(fv - dj))
            ok = (col >= 0) & (col < spec.width) & (row >= 0) & (row < spec.height)
            terms.append((row, col, wgt, ok))
    return terms


def g2p_bilinear(grid: Tensor, index: ProjectionIndex, spec: GridSpec | None = None) -> Tensor:
    """Read per-point features from the grid by four-cell interpolation.

    Neighbors outside the grid contribute zero, so points whose footprint
    only partially overlaps the view still read the in-bounds part; points
    with no valid neighbor come back all zero.
    """
    spec = spec or index.spec
    g = grid.data
    if g.ndim != 3 or g.shape[0] != spec.height or g.shape[1] != spec.width:
        raise ValueError("grid must be (H, W, C) matching the spec")
    c = g.shape[2]
    terms = _neighbor_terms(index, spec)

    out = np.zeros((index.n, c), dtype=g.dtype)
    for row, col, wgt, ok in terms:
        s = np.flatnonzero(ok)
        if s.size:
            out[s] += wgt[s, None] * g[row[s], col[s], :]

    def backward(grad):
        gg = np.zeros_like(g)
        for row, col, wgt, ok in terms:
            s = np.flatnonzero(ok)
            if s.size:
                np.add.at(gg, (row[s], col[s]), wgt[s, None] * grad[s])
        return (gg,)

    return record_op(out, (grid,), backward)


def coverage_stats(cloud, bev_spec: GridSpec, rv_spec: GridSpec) -> dict:
    """Fraction of points landing inside each view, both, and either."""
    bev = project_bev(cloud, bev_spec)
    rv = project_rv(cloud, rv_spec)
    n = bev.n
    if n == 0:
        return {"in_bev": 0.0, "in_rv": 0.0, "in_both": 0.0, "in_either": 0.0}
    return {
        "in_bev": float(np.count_nonzero(bev.in_range)) / n,
        "in_rv": float(np.count_nonzero(rv.in_range)) / n,
        "in_both": float(np.count_nonzero(bev.in_range & rv.in_range)) / n,
        "in_either": float(np.count_nonzero(bev.in_range | rv.in_range)) / n,
    }


def point_input_features(cloud, bev_index: ProjectionIndex, rv_index: ProjectionIndex) -> Tensor:
    """Nine input channels per point.

    Columns: x, y, z, intensity, r, dx, dy, dtheta, dphi. The d-columns are
    offsets from the containing cell's center, in meters for the top-down
    view and radians for the range view; they are zero for points outside
    the respective view.
    """
    xyz = cloud.xyz
    bspec, rspec = bev_index.spec, rv_index.spec

    brow, bcol = bev_index.cells()
    cell_w = (bspec.x_max - bspec.x_min) / bspec.width
    cell_h = (bspec.y_max - bspec.y_min) / bspec.height
    xc = bspec.x_min + (bcol + 0.5) * cell_w
    yc = bspec.y_min + (brow + 0.5) * cell_h
    dx = np.where(bev_index.in_range, xyz[:, 0] - xc, 0.0)
    dy = np.where(bev_index.in_range, xyz[:, 1] - yc, 0.0)

    rrow, rcol = rv_index.cells()
    # invert the view mapping at the cell center coordinates
    phi_c = (1.0 - 2.0 * (rcol + 0.5) / rspec.width) * np.pi
    theta_c = (1.0 - (rrow + 0.5) / rspec.height) * rspec.f - rspec.f_down
    dphi = np.where(rv_index.in_range, rv_index.phi - phi_c, 0.0)
    dtheta = np.where(rv_index.in_range, rv_index.theta - theta_c, 0.0)

    cols = np.stack(
        [xyz[:, 0], xyz[:, 1], xyz[:, 2], cloud.intensity, rv_index.r,
         dx, dy, dtheta, dphi],
        axis=1,
    )
    return Tensor(cols)
