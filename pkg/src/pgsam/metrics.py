"""Evaluation metrics on binary masks: DSC, HD95, accuracy and recall."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def _binary(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def dsc(pred_mask, gt_mask) -> float:
    """Dice similarity; two empty masks score 1.0."""
    pred, gt = _binary(pred_mask), _binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 8-neighbour outside the mask (image edge counts as outside)."""
    mask = _binary(mask)
    return mask & ~ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)


def directed_surface_distances(a, b) -> np.ndarray:
    """Distance from every boundary pixel of ``a`` to the nearest boundary pixel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndimage.distance_transform_edt(~bb)
    return dist_to_b[ba]


def hd95(pred_mask, gt_mask, percentile: float = 95.0) -> float:
    """Symmetric 95th-percentile Hausdorff distance in pixels.

    Returns NaN (the undefined sentinel) when either mask is empty.
    Percentiles interpolate linearly between order statistics.
    """
    pred, gt = _binary(pred_mask), _binary(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return math.nan
    d_pg = directed_surface_distances(pred, gt)
    d_gp = directed_surface_distances(gt, pred)
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def hausdorff(pred_mask, gt_mask) -> float:
    return hd95(pred_mask, gt_mask, percentile=100.0)


def is_undefined(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.TN, self.FN) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN

    @classmethod
    def from_masks(cls, pred_mask, gt_mask) -> "ConfusionCounts":
        pred, gt = _binary(pred_mask), _binary(gt_mask)
        return cls(
            int(np.sum(pred & gt)),
            int(np.sum(pred & ~gt)),
            int(np.sum(~pred & ~gt)),
            int(np.sum(~pred & gt)),
        )


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        return math.nan
    return (counts.TP + counts.TN) / counts.total


def recall(counts: ConfusionCounts) -> float:
    """``TP / (TP + FN)``; NaN when there are no positive pixels."""
    positives = counts.TP + counts.FN
    if positives == 0:
        return math.nan
    return counts.TP / positives


def mask_metrics(pred_mask, gt_mask) -> dict:
    counts = ConfusionCounts.from_masks(pred_mask, gt_mask)
    return {
        "dsc": dsc(pred_mask, gt_mask),
        "hd95": hd95(pred_mask, gt_mask),
        "acc": accuracy(counts),
        "rec": recall(counts),
    }
