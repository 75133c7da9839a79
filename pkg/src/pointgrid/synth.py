"""Synthetic labeled scans for desk-scale experiments.

Casts beam-structured rays from an origin sensor into a procedurally
placed scene (ground plane, box vehicles, cylinder poles, a wall, porous
vegetation blobs) and keeps the nearest hit per ray. Labels come from the
generating primitive, so per-class counts have an exact counting oracle.
Generation is deterministic in the seed and runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import IGNORE_LABEL, PointCloud

CLASS_NAMES = ["ground", "vehicle", "pole", "wall", "vegetation"]
GROUND, VEHICLE, POLE, WALL, VEGETATION = range(5)


@dataclass
class SynthSpec:
    """Knobs for scene generation; defaults give a few thousand points."""

    azimuths: int = 384
    beams: int = 14
    f_up: float = np.deg2rad(3.0)
    f_down: float = np.deg2rad(25.0)
    max_range: float = 60.0
    sensor_height: float = 1.8
    range_sigma: float = 0.012  # per-ray depth jitter, truncated at 3 sigma
    intensity_sigma: float = 0.03
    ignore_fraction: float = 0.015
    vehicles: tuple[int, int] = (2, 5)
    poles: tuple[int, int] = (2, 4)
    veg_blobs: tuple[int, int] = (2, 4)
    symmetric: bool = False  # mirror primitives 4-fold across x and y

    @property
    def noise_bound(self) -> float:
        return 3.0 * self.range_sigma


@dataclass
class SceneStats:
    """Bookkeeping for the counting oracle."""

    per_primitive: list = field(default_factory=list)  # (kind, class_id, n_points)
    class_counts_pre_ignore: np.ndarray = None
    ignored_per_class: np.ndarray = None


def _ray_directions(spec: SynthSpec) -> np.ndarray:
    """Unit directions on a beam x azimuth grid, mirrored exactly across x/y.

    Building one quadrant and negating components keeps the ray set exactly
    flip-symmetric, which symmetric scenes rely on.
    """
    n_az = spec.azimuths - spec.azimuths % 4  # multiple of 4 for exact mirroring
    quarter = n_az // 4
    phi = (np.arange(quarter) + 0.5) * (2.0 * np.pi / n_az)  # (0, pi/2)
    cos_q, sin_q = np.cos(phi), np.sin(phi)
    cos_phi = np.concatenate([cos_q, -cos_q, -cos_q, cos_q])
    sin_phi = np.concatenate([sin_q, sin_q, -sin_q, -sin_q])
    theta = np.linspace(-spec.f_down + 1e-3, spec.f_up - 1e-3, spec.beams)
    ct, st = np.cos(theta), np.sin(theta)
    dirs = np.empty((spec.beams * n_az, 3))
    dirs[:, 0] = np.outer(ct, cos_phi).ravel()
    dirs[:, 1] = np.outer(ct, sin_phi).ravel()
    dirs[:, 2] = np.repeat(st, n_az)
    return dirs


def _hit_ground(dirs, z_ground):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = z_ground / dz
    t[dz >= 0] = np.inf
    return t


def _hit_box(dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / dirs
        t2 = hi / dirs
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    t = np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)
    return t


def _hit_cylinder(dirs, cx, cy, radius, z0, z1):
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = -2.0 * (dirs[:, 0] * cx + dirs[:, 1] * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2.0 * a)
    z = t * dirs[:, 2]
    ok = (disc > 0) & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(ok, t, np.inf)


def _hit_sphere(dirs, center, radius):
    dc = dirs @ center
    disc = dc * dc - (center @ center - radius * radius)
    with np.errstate(invalid="ignore"):
        t = dc - np.sqrt(disc)
    return np.where((disc > 0) & (t > 0), t, np.inf)


def _place_primitives(spec: SynthSpec, rng: np.random.Generator):
    """Sample primitive parameters; returns a list of (kind, class_id, params)."""
    z_ground = -spec.sensor_height
    prims = []

    def mirrored(entries):
        if not spec.symmetric:
            return entries
        out = []
        for kind, cls, p in entries:
            for sx in (1.0, -1.0):
                for sy in (1.0, -1.0):
                    q = dict(p)
                    if kind == "box":
                        lo, hi = p["lo"].copy(), p["hi"].copy()
                        lo2 = lo.copy()
                        hi2 = hi.copy()
                        lo2[0], hi2[0] = min(sx * lo[0], sx * hi[0]), max(sx * lo[0], sx * hi[0])
                        lo2[1], hi2[1] = min(sy * lo[1], sy * hi[1]), max(sy * lo[1], sy * hi[1])
                        q = {"lo": lo2, "hi": hi2}
                    elif kind == "cylinder":
                        q = dict(p, cx=sx * p["cx"], cy=sy * p["cy"])
                    elif kind == "sphere":
                        c = p["center"].copy()
                        c[0] *= sx
                        c[1] *= sy
                        q = dict(p, center=c)
                    out.append((kind, cls, q))
        return out

    def ring_position(r_lo, r_hi):
        r = rng.uniform(r_lo, r_hi)
        a = rng.uniform(0, 2 * np.pi)
        return r * np.cos(a), r * np.sin(a)

    vehicles = []
    for _ in range(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1)):
        cx, cy = ring_position(6.0, 24.0)
        lx, ly = rng.uniform(3.5, 5.0), rng.uniform(1.7, 2.1)
        h = rng.uniform(1.4, 1.9)
        lo = np.array([cx - lx / 2, cy - ly / 2, z_ground])
        hi = np.array([cx + lx / 2, cy + ly / 2, z_ground + h])
        vehicles.append(("box", VEHICLE, {"lo": lo, "hi": hi}))
    prims += mirrored(vehicles)

    poles = []
    for _ in range(rng.integers(spec.poles[0], spec.poles[1] + 1)):
        cx, cy = ring_position(4.0, 26.0)
        poles.append(
            ("cylinder", POLE,
             {"cx": cx, "cy": cy, "radius": rng.uniform(0.09, 0.22),
              "z0": z_ground, "z1": z_ground + rng.uniform(3.5, 6.0)})
        )
    prims += mirrored(poles)

    # one wall slab on a random side (all four sides when symmetric)
    d = rng.uniform(18.0, 32.0)
    half = rng.uniform(26.0, 38.0)
    height = rng.uniform(3.5, 5.0)
    side = int(rng.integers(0, 4))
    walls = []
    sides = range(4) if spec.symmetric else [side]
    for s in sides:
        if s in (0, 1):
            x0, x1 = (d, d + 0.5) if s == 0 else (-d - 0.5, -d)
            lo = np.array([x0, -half, z_ground])
            hi = np.array([x1, half, z_ground + height])
        else:
            y0, y1 = (d, d + 0.5) if s == 2 else (-d - 0.5, -d)
            lo = np.array([-half, y0, z_ground])
            hi = np.array([half, y1, z_ground + height])
        walls.append(("box", WALL, {"lo": lo, "hi": hi}))
    prims += walls

    veg = []
    for _ in range(rng.integers(spec.veg_blobs[0], spec.veg_blobs[1] + 1)):
        cx, cy = ring_position(8.0, 24.0)
        cz = z_ground + rng.uniform(1.2, 3.0)
        veg.append(
            ("sphere", VEGETATION,
             {"center": np.array([cx, cy, cz]), "radius": rng.uniform(1.2, 2.6)})
        )
    prims += mirrored(veg)
    return prims


_INTENSITY_BASE = np.array([0.20, 0.50, 0.80, 0.35, 0.65])


def build_scene(seed: int, spec: SynthSpec | None = None):
    """Generate one labeled scan; returns ``(cloud, stats)``.

    Retries placement (deterministically, continuing the seeded stream) until
    every class has at least one point, so the default spec yields all
    classes with probability 1.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(np.random.PCG64(seed))
    dirs = _ray_directions(spec)
    z_ground = -spec.sensor_height

    for _attempt in range(16):
        prims = _place_primitives(spec, rng)
        t_best = _hit_ground(dirs, z_ground)
        label = np.full(dirs.shape[0], GROUND, dtype=np.int32)
        winner = np.full(dirs.shape[0], -1, dtype=np.int64)  # -1 = ground
        for pid, (kind, cls, p) in enumerate(prims):
            if kind == "box":
                t = _hit_box(dirs, p["lo"], p["hi"])
            elif kind == "cylinder":
                t = _hit_cylinder(dirs, p["cx"], p["cy"], p["radius"], p["z0"], p["z1"])
            else:
                t = _hit_sphere(dirs, p["center"], p["radius"])
                porous = rng.random(dirs.shape[0]) < 0.45
                t = np.where(porous, np.inf, t + rng.uniform(0, 0.6, dirs.shape[0]))
            closer = t < t_best
            t_best = np.where(closer, t, t_best)
            label[closer] = cls
            winner[closer] = pid
        hit = np.isfinite(t_best) & (t_best <= spec.max_range)
        if all(np.any(label[hit] == c) for c in range(len(CLASS_NAMES))):
            break
    t_best, label, winner = t_best[hit], label[hit], winner[hit]
    d_hit = dirs[hit]

    jitter = np.clip(
        rng.normal(0.0, spec.range_sigma, t_best.shape),
        -spec.noise_bound, spec.noise_bound,
    )
    xyz = d_hit * (t_best + jitter)[:, None]
    intensity = np.clip(
        _INTENSITY_BASE[label] + rng.normal(0.0, spec.intensity_sigma, label.shape),
        0.0, 1.0,
    )

    stats = SceneStats()
    stats.per_primitive = [("ground", GROUND, int(np.sum(winner == -1)))]
    for pid, (kind, cls, _p) in enumerate(prims):
        n = int(np.sum(winner == pid))
        if n:
            stats.per_primitive.append((kind, int(cls), n))
    stats.class_counts_pre_ignore = np.bincount(label, minlength=len(CLASS_NAMES))

    final = label.copy()
    ignore_mask = rng.random(label.shape) < spec.ignore_fraction
    final[ignore_mask] = IGNORE_LABEL
    stats.ignored_per_class = np.bincount(
        label[ignore_mask], minlength=len(CLASS_NAMES)
    )

    cloud = PointCloud(xyz=xyz, intensity=intensity, labels=final)
    return cloud, stats


def synth_scene(seed: int, spec: SynthSpec | None = None) -> PointCloud:
    """Deterministic labeled scene for the given seed."""
    return build_scene(seed, spec)[0]


def synth_corpus(base_seed: int, count: int, spec: SynthSpec | None = None):
    """List of scenes with consecutive seeds starting at ``base_seed``."""
    return [synth_scene(base_seed + i, spec) for i in range(count)]
