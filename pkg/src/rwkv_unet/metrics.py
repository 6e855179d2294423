"""Evaluation metrics: Dice similarity and 95th-percentile Hausdorff distance (pixels)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class DscResult:
    per_class: np.ndarray
    mean: float


def dsc(pred: np.ndarray, true: np.ndarray, class_count: int, include_background: bool = False) -> DscResult:
    """Per-class Dice over labels 1..K-1 (or 0..K-1); a class absent from both scores 1."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    k = max(class_count, 2)
    start = 0 if include_background else 1
    scores = []
    for c in range(start, k):
        p, t = pred == c, true == c
        denom = int(p.sum()) + int(t.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
    per = np.array(scores)
    return DscResult(per, float(per.mean()) if per.size else 1.0)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(m.ndim, 1), border_value=0)
    return m & ~inner


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every pixel to the nearest dst boundary pixel, sampled on src boundary
    return ndimage.distance_transform_edt(~dst)[src]


def hd95(pred: np.ndarray, true: np.ndarray) -> float:
    """95th percentile (linear interpolation) of the pooled directed boundary distances.

    Both empty gives 0.0; exactly one empty gives NaN (undefined).
    """
    p, t = np.asarray(pred, dtype=bool), np.asarray(true, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return math.nan
    bp, bt = boundary(p), boundary(t)
    dists = np.concatenate([_directed(bp, bt), _directed(bt, bp)])
    return float(np.percentile(dists, 95))


@dataclass
class Hd95Summary:
    per_class: np.ndarray  # NaN where undefined
    mean: float  # over defined entries; NaN if none
    undefined: int


def hd95_per_class(pred: np.ndarray, true: np.ndarray, class_count: int) -> Hd95Summary:
    vals = np.array([hd95(pred == c, true == c) for c in range(1, max(class_count, 2))])
    ok = ~np.isnan(vals)
    return Hd95Summary(vals, float(vals[ok].mean()) if ok.any() else math.nan, int((~ok).sum()))
