"""Binary segmentation metrics shared by every experiment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domains import TaskSample
from .models import ModelParams, forward_batch


@dataclass(frozen=True)
class MetricResult:
    dice: float
    iou: float
    n_samples: int


def _check_binary(arr: np.ndarray, name: str) -> None:
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary; threshold predictions first")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    _check_binary(pred_mask, "pred_mask")
    _check_binary(gt_mask, "gt_mask")
    inter = float(np.sum(pred_mask * gt_mask))
    total = float(pred_mask.sum() + gt_mask.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """|A∩B| / |A∪B|; 1.0 when both masks are empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    _check_binary(pred_mask, "pred_mask")
    _check_binary(gt_mask, "gt_mask")
    inter = float(np.sum(pred_mask * gt_mask))
    union = float(pred_mask.sum() + gt_mask.sum()) - inter
    return 1.0 if union == 0 else inter / union


def evaluate_pairs(prob_maps: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> MetricResult:
    """Average per-sample dice/iou of thresholded probability maps (>= is foreground)."""
    preds = (prob_maps >= threshold).astype(np.float64)
    d = [dice(p, m) for p, m in zip(preds, masks)]
    j = [iou(p, m) for p, m in zip(preds, masks)]
    return MetricResult(dice=float(np.mean(d)), iou=float(np.mean(j)), n_samples=len(d))


def evaluate(model: ModelParams, test: list[TaskSample], threshold: float = 0.5) -> MetricResult:
    if not test:
        raise ValueError("test set is empty")
    images = np.stack([s.image for s in test])
    masks = np.stack([s.mask for s in test])
    probs = forward_batch(model, images).data
    return evaluate_pairs(probs, masks, threshold)


def evaluate_generated(model: ModelParams, samples, threshold: float = 0.5) -> MetricResult:
    """Same as evaluate, for GeneratedSample lists."""
    if not samples:
        raise ValueError("sample set is empty")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    probs = forward_batch(model, images).data
    return evaluate_pairs(probs, masks, threshold)
