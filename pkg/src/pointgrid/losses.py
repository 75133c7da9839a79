"""Training losses: weighted cross-entropy, Jaccard surrogate, consistency.

All three return scalar tensors on the tape. Per-point sums are
normalized by the scored point count so magnitudes do not scale with
cloud size. Points labeled with the ignore id contribute neither value
nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pointcloud import IGNORE_LABEL


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, reciprocal in class frequency."""

    alpha: np.ndarray
    epsilon: float = 0.001

    @classmethod
    def from_frequencies(cls, freq, epsilon: float = 0.001):
        freq = np.asarray(freq, dtype=np.float64)
        if np.any(freq < 0):
            raise ValueError("frequencies must be nonnegative")
        return cls(alpha=1.0 / (freq + epsilon), epsilon=epsilon)

    @classmethod
    def uniform(cls, num_classes: int):
        return cls(alpha=np.ones(num_classes, dtype=np.float64))


def _scored(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return np.flatnonzero(labels != IGNORE_LABEL)


def wce_loss(logits: Tensor, labels: np.ndarray, weights: ClassWeights) -> Tensor:
    """Mean over scored points of alpha[label] * (-log softmax[label]).

    Returns a constant zero when every point is ignored.
    """
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"wce_loss: labels shape {labels.shape} != ({n},)")
    sel = _scored(labels)
    if sel.size == 0:
        return Tensor(0.0)
    lab = labels[sel].astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("wce_loss: label id outside [0, C)")
    lp = ad.log_softmax(logits, axis=1)
    picked = ad.take(lp, sel * c + lab)
    scale = -weights.alpha[lab] / sel.size
    return ad.sum_all(ad.affine(picked, scale=scale))


def _jaccard_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard extension along the sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Jaccard-surrogate loss averaged over the classes present.

    Per class, the misprediction errors are sorted descending and weighted
    by the Jaccard-extension gradient; the sort order and weights are
    treated as constants of the backward pass.
    """
    n, c = probs.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"lovasz_softmax_loss: labels shape {labels.shape} != ({n},)")
    sel = _scored(labels)
    if sel.size == 0:
        return Tensor(0.0)
    lab = labels[sel].astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("lovasz_softmax_loss: label id outside [0, C)")

    present = np.unique(lab)
    terms = []
    for cls in present:
        fg = (lab == cls).astype(probs.data.dtype)
        p_col = ad.take(probs, sel * c + cls)
        # e = p on background, 1 - p on foreground
        err = ad.affine(p_col, scale=1.0 - 2.0 * fg, shift=fg)
        order = np.argsort(-err.data, kind="stable")
        weights = _jaccard_grad(fg[order])
        terms.append(ad.sum_all(ad.mul(ad.take(err, order), Tensor(weights))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.affine(total, scale=1.0 / len(present))


def consistency_loss(probs_raw: Tensor, probs_aug: Tensor) -> Tensor:
    """Mean per-point L1 distance between two probability sets.

    Row k of both inputs must describe the same physical point; gradients
    reach both.
    """
    if probs_raw.data.shape != probs_aug.data.shape:
        raise ValueError(
            f"consistency_loss: shapes {probs_raw.data.shape} != {probs_aug.data.shape}"
        )
    n = probs_raw.data.shape[0]
    if n == 0:
        return Tensor(0.0)
    gap = ad.absolute(ad.sub(probs_raw, probs_aug))
    return ad.affine(ad.sum_all(gap), scale=1.0 / n)


def total_loss(wce: Tensor, ls: Tensor, tc: Tensor | None = None) -> Tensor:
    """wce + 2*ls (+ tc when the consistency term is enabled)."""
    out = ad.add(wce, ad.affine(ls, scale=2.0))
    if tc is not None:
        out = ad.add(out, tc)
    return out
