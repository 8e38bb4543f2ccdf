"""Foreground-class segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch

METRIC_NAMES = ("dice_loss", "iou", "f_score", "accuracy", "recall", "precision")


@dataclass(frozen=True)
class SegMetrics:
    dice_loss: float
    iou: float
    f_score: float
    accuracy: float
    recall: float
    precision: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, items) -> "SegMetrics":
        items = list(items)
        return cls(**{k: float(np.mean([getattr(m, k) for m in items])) for k in METRIC_NAMES})


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """Pixel counts ``(TP, FP, FN, TN)`` for binary masks."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def _ratio(num: int, den: int) -> float:
    # zero denominator means both sets involved are empty: perfect agreement
    return 1.0 if den == 0 else num / den


def seg_metrics(counts) -> SegMetrics:
    tp, fp, fn, tn = counts
    if min(counts) < 0:
        raise ValueError(f"counts must be non-negative, got {counts}")
    iou = _ratio(tp, tp + fp + fn)
    f = _ratio(2 * tp, 2 * tp + fp + fn)
    recall = _ratio(tp, tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    precision = _ratio(tp, tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    return SegMetrics(
        dice_loss=1.0 - f,
        iou=iou,
        f_score=f,
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        recall=recall,
        precision=precision,
    )


def dice_loss_soft(pred_probs, gt, eps: float = 1e-7):
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``; works on arrays or tensors."""
    if isinstance(pred_probs, torch.Tensor):
        gt = torch.as_tensor(gt, dtype=pred_probs.dtype)
        if pred_probs.shape != gt.shape:
            raise ValueError(f"pred {tuple(pred_probs.shape)} and gt {tuple(gt.shape)} differ")
        return 1.0 - (2.0 * (pred_probs * gt).sum() + eps) / (pred_probs.sum() + gt.sum() + eps)
    p, g = np.asarray(pred_probs, np.float64), np.asarray(gt, np.float64)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} differ")
    return float(1.0 - (2.0 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps))
