"""Segmentation quality measures on an integer confusion matrix.

Rows index the true class, columns the predicted class, counts are 64-bit.
Per-class IoU is ``tp / (row + col - tp)``; classes absent from both truth
and prediction are left out of the means.  Dice relates to IoU by
``dice = 2 * iou / (1 + iou)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "per_class_iou",
    "per_class_dice",
    "miou",
    "miou_of",
    "pixel_acc",
    "dice",
]


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, truth: np.ndarray,
                   ignore_index: int = 255) -> None:
        """Add one mask pair; pixels whose truth is ``ignore_index`` are skipped."""
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
        keep = truth != ignore_index
        p = pred[keep].astype(np.int64)
        t = truth[keep].astype(np.int64)
        k = self.num_classes
        for name, arr in (("prediction", p), ("truth", t)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                off = arr.min() if arr.min() < 0 else arr.max()
                raise ValueError(f"{name} contains class {int(off)} outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise ValueError(
                f"cannot merge {other.num_classes}-class matrix into "
                f"{self.num_classes}-class matrix")
        self.counts += other.counts

    def total(self) -> int:
        return int(self.counts.sum())


def _check_scored(cm: ConfusionMatrix) -> None:
    if cm.total() == 0:
        raise ValueError("confusion matrix has no scored pixels")


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from truth and prediction."""
    _check_scored(cm)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - tp
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = tp[present] / denom[present]
    return out


def per_class_dice(cm: ConfusionMatrix) -> np.ndarray:
    _check_scored(cm)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0)
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = 2.0 * tp[present] / denom[present]
    return out


def miou(cm: ConfusionMatrix) -> float:
    vals = per_class_iou(cm)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("no class present in truth or prediction")
    return float(vals.mean())


def miou_of(cm: ConfusionMatrix, classes) -> float:
    """Mean IoU restricted to ``classes``, still skipping absent ones."""
    ids = sorted(set(int(c) for c in classes))
    if not ids or ids[0] < 0 or ids[-1] >= cm.num_classes:
        raise ValueError(f"class subset {ids} outside 0..{cm.num_classes - 1}")
    vals = per_class_iou(cm)[ids]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError(f"none of the classes {ids} is present")
    return float(vals.mean())


def pixel_acc(cm: ConfusionMatrix) -> float:
    _check_scored(cm)
    return float(np.trace(cm.counts) / cm.counts.sum())


def dice(cm: ConfusionMatrix) -> float:
    vals = per_class_dice(cm)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("no class present in truth or prediction")
    return float(vals.mean())
