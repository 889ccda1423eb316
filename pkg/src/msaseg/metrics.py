"""Segmentation quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class MetricsReport:
    per_class_iou: dict
    miou: float
    pixel_accuracy: float
    loss_curve: list = field(default_factory=list)


def _as_labels(x, name):
    arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype != np.uint32:
        raise ParameterError(f"{name} must be u32, got {arr.dtype}")
    return arr


def confusion_counts(pred, gt, classes, ignore_label=255):
    """Per-class (intersection, union) plus (correct, valid) pixel counts."""
    pred = _as_labels(pred, "pred")
    gt = _as_labels(gt, "gt")
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} disagree")
    valid = gt != np.uint32(ignore_label)
    if (pred[valid] >= classes).any() or (gt[valid] >= classes).any():
        raise ParameterError(f"labels outside [0, {classes}) present")
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    for j in range(classes):
        p = (pred == j) & valid
        g = (gt == j) & valid
        inter[j] = int((p & g).sum())
        union[j] = int((p | g).sum())
    correct = int(((pred == gt) & valid).sum())
    return inter, union, correct, int(valid.sum())


def report_from_counts(inter, union, correct, valid):
    """mIoU over classes present in prediction or ground truth."""
    if valid == 0:
        raise ParameterError("no valid pixels to score")
    per_class = {j: inter[j] / union[j] for j in range(len(union)) if union[j] > 0}
    if not per_class:
        raise ParameterError("no valid classes to score")
    return MetricsReport(
        per_class_iou=per_class,
        miou=float(np.mean(list(per_class.values()))),
        pixel_accuracy=correct / valid,
    )


def eval_miou(pred, gt, classes, ignore_label=255):
    """Intersection-over-union per class, averaged over classes that occur.

    Classes absent from both prediction and ground truth are excluded from
    the mean; ignored pixels take part in nothing.
    """
    return report_from_counts(*confusion_counts(pred, gt, classes, ignore_label))
