"""Segmentation and saliency metrics: Acc, mAcc, mIoU from a confusion matrix, and MAE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, LabelOutOfRange, LfxError, ShapeMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[i, j]`` is the number of pixels with ground truth i predicted as j."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeMismatch(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise LfxError("confusion counts must be nonnegative")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatch("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, gt, pred, ignore_label: int | None = None) -> ConfusionMatrix:
    """Tally ``gt``/``pred`` label grids into a new matrix, skipping ``ignore_label``."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    n = cm.num_classes
    gt = gt.reshape(-1).astype(np.int64)
    pred = pred.reshape(-1).astype(np.int64)
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    gt, pred = gt[keep], pred[keep]
    bad = (gt < 0) | (gt >= n) | (pred < 0) | (pred >= n)
    if bad.any():
        raise LabelOutOfRange(f"labels must lie in [0, {n}) or equal the ignore label")
    tally = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + tally)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """cm[i, i] / rowsum_i; NaN for classes absent from the ground truth."""
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1)
    return np.divide(np.diag(counts), rows, out=np.full(rows.shape, np.nan), where=rows > 0)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """NaN for classes absent from both ground truth and prediction."""
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - inter
    return np.divide(inter, union, out=np.full(union.shape, np.nan), where=union > 0)


def miou(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Return ``(Acc, mAcc, mIoU)``, each in [0, 1]."""
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    acc = float(np.trace(cm.counts)) / total
    class_acc = per_class_accuracy(cm)
    class_iou = per_class_iou(cm)
    return acc, float(np.nanmean(class_acc)), float(np.nanmean(class_iou))


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.size == 0:
        raise EmptyMatrix("empty maps")
    return float(np.abs(pred - gt).mean())


def format_report(values: dict[str, float]) -> str:
    return "".join(f"{name}={value:.6f}\n" for name, value in values.items())
