"""Confusion matrix accumulation and IoU / mIoU summaries."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .losses import IGNORE_ID


class ConfusionMatrix:
    """Counts indexed [ground truth, prediction] over class ids 0..K-1."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction/ground-truth size mismatch: {pred.shape} vs {gt.shape}")
        keep = gt != IGNORE_ID
        k = self.num_classes
        idx = gt[keep] * k + pred[keep]
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self, class_id: int) -> float:
        """tp / (tp + fp + fn), or NaN when the class never occurs."""
        tp = self.counts[class_id, class_id]
        fp = self.counts[:, class_id].sum() - tp
        fn = self.counts[class_id, :].sum() - tp
        denom = tp + fp + fn
        return float(tp / denom) if denom else math.nan

    def miou(self, group: Iterable[int]) -> float:
        """Mean IoU over the defined classes of ``group`` (NaN if none)."""
        vals = [v for v in (self.iou(c) for c in group) if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def format_value(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"
