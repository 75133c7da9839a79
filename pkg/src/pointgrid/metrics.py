"""Per-class IoU bookkeeping over a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import IGNORE_LABEL


class ConfusionMatrix:
    """C x C counts, rows ground truth, cols prediction; ignore excluded."""

    def __init__(self, num_classes: int):
        if num_classes <= 0:
            raise ValueError("need a positive class count")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predictions, labels) -> "ConfusionMatrix":
        pred = np.asarray(predictions).ravel()
        lab = np.asarray(labels).ravel()
        if pred.shape != lab.shape:
            raise ValueError("accumulate: predictions and labels differ in length")
        keep = lab != IGNORE_LABEL
        pred, lab = pred[keep].astype(np.int64), lab[keep].astype(np.int64)
        c = self.num_classes
        if pred.size:
            if pred.min() < 0 or pred.max() >= c or lab.min() < 0 or lab.max() >= c:
                raise ValueError("accumulate: class id outside [0, C)")
            self.counts += np.bincount(lab * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("merge: class count mismatch")
        self.counts += other.counts
        return self

    def reset(self) -> None:
        self.counts[:] = 0


@dataclass
class IouResult:
    per_class: np.ndarray  # NaN where the class is absent from gt and pred
    present: np.ndarray  # bool mask of classes entering the mean
    mean: float  # NaN when nothing was scored
    empty: bool  # True when the matrix had no counts at all

    def __iter__(self):  # allows  per_class, mean = miou(cm)  unpacking
        yield self.per_class
        yield self.mean


def miou(cm: ConfusionMatrix) -> IouResult:
    """Per-class TP/(TP+FP+FN); absent classes are left out of the mean."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    per_class = np.full(cm.num_classes, np.nan)
    np.divide(tp, denom, out=per_class, where=present)
    if not present.any():
        return IouResult(per_class, present, float("nan"), empty=True)
    return IouResult(per_class, present, float(per_class[present].mean()), empty=False)


def report(cm: ConfusionMatrix, class_names=None) -> str:
    """Aligned IoU table plus machine-readable key=value lines."""
    res = miou(cm)
    names = class_names or [f"class_{i}" for i in range(cm.num_classes)]
    width = max(len(n) for n in names)
    lines = []
    for i, name in enumerate(names):
        iou = "absent" if not res.present[i] else f"{res.per_class[i]:.4f}"
        lines.append(f"  {name:<{width}}  {iou}")
    mean_txt = "nan" if res.empty else f"{res.mean:.4f}"
    lines.append(f"  {'mean':<{width}}  {mean_txt}")
    lines.append("")
    for i, name in enumerate(names):
        if res.present[i]:
            lines.append(f"iou_{name}={res.per_class[i]:.6f}")
    lines.append(f"miou={mean_txt if res.empty else format(res.mean, '.6f')}")
    lines.append(f"scored_points={int(cm.counts.sum())}")
    return "\n".join(lines)
