"""Point cloud containers, binary scan/label IO, and augmentation.

Scan files are headerless little-endian float32 quadruples (x, y, z,
intensity); label files are little-endian uint32 records whose low 16 bits
carry the semantic id and high 16 bits the (discarded) instance id. The
raw-to-train label table ships as a text config so dataset revisions can
swap ids without code changes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255


@dataclass
class PointCloud:
    """N points with position (meters), intensity in [0, 1], optional train labels."""

    xyz: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None = None
    dropped: int = 0  # non-finite points removed at load time

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
            if self.labels.shape[0] != self.xyz.shape[0]:
                raise ValueError("labels length does not match point count")
        if self.intensity.shape[0] != self.xyz.shape[0]:
            raise ValueError("intensity length does not match point count")

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.xyz.copy(),
            self.intensity.copy(),
            None if self.labels is None else self.labels.copy(),
            self.dropped,
        )

    def digest(self) -> str:
        """Content hash over 64-bit coordinates, intensity, and labels."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.xyz, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.intensity, dtype="<f8").tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels, dtype="<i4").tobytes())
        return h.hexdigest()


class ScanFormatError(ValueError):
    pass


def load_scan(path) -> PointCloud:
    """Parse a binary scan; drops non-finite points and clamps intensity to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise ScanFormatError(f"{path}: size {len(raw)} not divisible by 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(rec).all(axis=1)
    kept = rec[finite]
    return PointCloud(
        xyz=kept[:, :3].astype(np.float64),
        intensity=np.clip(kept[:, 3].astype(np.float64), 0.0, 1.0),
        dropped=int((~finite).sum()),
    )


def write_scan(path, cloud: PointCloud) -> None:
    rec = np.empty((cloud.n, 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    Path(path).write_bytes(rec.tobytes())


@dataclass
class LabelMap:
    """Raw dataset label ids mapped onto the train id set, plus class metadata."""

    raw_to_train: dict[int, int]
    class_names: list[str]
    class_frequency: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __post_init__(self):
        self.class_frequency = np.asarray(self.class_frequency, dtype=np.float64)
        if self.class_frequency.shape != (len(self.class_names),):
            raise ValueError("class_frequency length must match class_names")
        if (self.class_frequency < 0).any():
            raise ValueError("class frequencies must be nonnegative")
        for raw, train in self.raw_to_train.items():
            if train != IGNORE_LABEL and not 0 <= train < self.num_classes:
                raise ValueError(f"raw id {raw} maps to invalid train id {train}")


def load_label_map(path) -> LabelMap:
    """Read the text label-map config (``class``/``map`` lines, '#' comments)."""
    raw_to_train: dict[int, int] = {}
    names: list[str] = []
    freqs: list[float] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "class" and len(parts) == 4:
            idx, name, freq = int(parts[1]), parts[2], float(parts[3])
            if idx != len(names):
                raise ValueError(f"{path}:{lineno}: class ids must be consecutive")
            names.append(name)
            freqs.append(freq)
        elif parts[0] == "map" and len(parts) == 3:
            train = IGNORE_LABEL if parts[2] == "ignore" else int(parts[2])
            raw_to_train[int(parts[1])] = train
        else:
            raise ValueError(f"{path}:{lineno}: unrecognized line {line!r}")
    return LabelMap(raw_to_train, names, np.asarray(freqs))


def load_labels(path, label_map: LabelMap, expected_n: int | None = None):
    """Parse a binary label file and remap to train ids.

    Returns ``(train_ids, unknown_count)`` where unknown raw ids degrade to
    the ignore label and are tallied instead of raising.
    """
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise ScanFormatError(f"{path}: size {len(raw)} not divisible by 4 bytes")
    rec = np.frombuffer(raw, dtype="<u4")
    if expected_n is not None and rec.shape[0] != expected_n:
        raise ValueError(
            f"{path}: {rec.shape[0]} labels for a scan with {expected_n} points"
        )
    semantic = (rec & 0xFFFF).astype(np.int64)
    lut_size = max(int(semantic.max(initial=0)) + 1, max(label_map.raw_to_train, default=0) + 1)
    lut = np.full(lut_size, -1, dtype=np.int32)
    for r, t in label_map.raw_to_train.items():
        lut[r] = t
    mapped = lut[semantic]
    unknown = int((mapped == -1).sum())
    mapped[mapped == -1] = IGNORE_LABEL
    return mapped, unknown


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentationSpec:
    """Sampling ranges for the training-time cloud transforms."""

    rotation_z: float = np.pi  # uniform in [-rotation_z, rotation_z]
    scale_min: float = 0.95
    scale_max: float = 1.05
    flip_x: float = 0.5  # probability of negating x
    flip_y: float = 0.5
    noise_sigma: float = 0.02  # meters, applied to xyz only

    def __post_init__(self):
        if not (0.0 < self.scale_min <= self.scale_max < 2.0):
            raise ValueError("scale range must lie inside (0, 2)")
        if not (0.0 <= self.flip_x <= 1.0 and 0.0 <= self.flip_y <= 1.0):
            raise ValueError("flip probabilities must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(rotation_z=0.0, scale_min=1.0, scale_max=1.0,
                   flip_x=0.0, flip_y=0.0, noise_sigma=0.0)


@dataclass
class Transform:
    """The sampled deterministic part of one augmentation draw."""

    angle: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False


def apply_transform(cloud: PointCloud, t: Transform) -> PointCloud:
    """Rotate about z, scale isotropically, then flip axes; labels unchanged."""
    xyz = cloud.xyz
    if t.angle != 0.0:
        c, s = np.cos(t.angle), np.sin(t.angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        xyz = xyz @ rot.T
    if t.scale != 1.0:
        xyz = xyz * t.scale
    if t.flip_x or t.flip_y:
        xyz = xyz.copy()
        if t.flip_x:
            xyz[:, 0] = -xyz[:, 0]
        if t.flip_y:
            xyz[:, 1] = -xyz[:, 1]
    out = cloud.copy()
    out.xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    return out


def augment(cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator):
    """Sample one augmentation, apply it, and return ``(cloud, transform)``.

    Point order is preserved so raw/augmented prediction rows stay paired.
    """
    t = Transform(
        angle=float(rng.uniform(-spec.rotation_z, spec.rotation_z)) if spec.rotation_z else 0.0,
        scale=float(rng.uniform(spec.scale_min, spec.scale_max)),
        flip_x=bool(rng.random() < spec.flip_x),
        flip_y=bool(rng.random() < spec.flip_y),
    )
    out = apply_transform(cloud, t)
    if spec.noise_sigma > 0:
        out.xyz = out.xyz + rng.normal(0.0, spec.noise_sigma, size=out.xyz.shape)
    return out, t


def tta_variants(cloud: PointCloud) -> list[PointCloud]:
    """[identity, flip-x, flip-y, flip-xy] copies for test-time augmentation."""
    return [
        cloud.copy(),
        apply_transform(cloud, Transform(flip_x=True)),
        apply_transform(cloud, Transform(flip_y=True)),
        apply_transform(cloud, Transform(flip_x=True, flip_y=True)),
    ]


def compute_frequencies(label_arrays, num_classes: int) -> np.ndarray:
    """Class frequency over a corpus, normalized over non-ignored points."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_arrays:
        valid = labels[labels != IGNORE_LABEL]
        counts += np.bincount(valid, minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        return np.zeros(num_classes)
    return counts / total
