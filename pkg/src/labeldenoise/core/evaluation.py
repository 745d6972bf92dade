"""Confusion matrices, per-class IoU and the diagnostics behind the adaptation reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np
import torch
import torch.nn as nn

from .denoise import SoftmaxMap
from .errors import InputError
from .network import predict_probs


@dataclass(slots=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.counts.shape != self.counts.shape:
            raise InputError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(counts=self.counts + other.counts)


@dataclass(slots=True)
class EvalReport:
    per_class_iou: np.ndarray
    miou: float
    excluded_classes: List[int] = field(default_factory=list)
    per_class_prediction_mass: np.ndarray | None = None
    rank_histogram: np.ndarray | None = None

    def applicable(self) -> np.ndarray:
        return ~np.isnan(self.per_class_iou)


def _as_numpy(values: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def accumulate_confusion(
    predictions: np.ndarray | torch.Tensor,
    ground_truth: np.ndarray | torch.Tensor,
    num_classes: int,
    valid_mask: np.ndarray | torch.Tensor | None = None,
) -> ConfusionMatrix:
    predictions = _as_numpy(predictions).astype(np.int64)
    ground_truth = _as_numpy(ground_truth).astype(np.int64)
    if predictions.shape != ground_truth.shape:
        raise InputError(f"prediction shape {predictions.shape} does not match ground truth {ground_truth.shape}")
    mask = np.ones(predictions.shape, dtype=bool) if valid_mask is None else _as_numpy(valid_mask).astype(bool)
    truth = ground_truth[mask]
    predicted = predictions[mask]
    for name, values in (("ground truth", truth), ("prediction", predicted)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise InputError(f"{name} labels must lie in [0, {num_classes})")
    flat = np.bincount(num_classes * truth + predicted, minlength=num_classes**2)
    return ConfusionMatrix(counts=flat.reshape(num_classes, num_classes))


def compute_iou(cm: ConfusionMatrix, excluded: Iterable[int] = ()) -> EvalReport:
    """IoU per class; classes with an empty union are not applicable and skipped by the mean."""
    excluded_classes = sorted({int(cls) for cls in excluded})
    intersection = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - intersection
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, intersection / np.where(union > 0, union, 1), np.nan)
    scored = [cls for cls in range(cm.num_classes) if not np.isnan(iou[cls]) and cls not in excluded_classes]
    if not scored:
        raise InputError("no applicable class left to average: every class is empty or excluded")
    return EvalReport(per_class_iou=iou, miou=float(np.mean(iou[scored])), excluded_classes=excluded_classes)


def class_mass_diagnostics(predictions: np.ndarray | torch.Tensor, num_classes: int) -> np.ndarray:
    """Fraction of pixels predicted as each class; the winner-takes-all trajectory."""
    labels = _as_numpy(predictions).astype(np.int64).ravel()
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def rank_histogram(preds: SoftmaxMap, ground_truth: np.ndarray | torch.Tensor) -> np.ndarray:
    """Bin ``x`` (index ``x - 1``) counts pixels whose true class has descending softmax rank ``x``."""
    truth = torch.as_tensor(_as_numpy(ground_truth), dtype=torch.long)
    if tuple(truth.shape) != preds.pixel_shape:
        raise InputError(f"ground truth shape {tuple(truth.shape)} does not match predictions {preds.pixel_shape}")
    if truth.numel() and (truth.min() < 0 or truth.max() >= preds.num_classes):
        raise InputError(f"ground truth labels must lie in [0, {preds.num_classes})")
    order = torch.argsort(-preds.probs.detach(), dim=-1, stable=True)
    ranks = (order == truth.unsqueeze(-1)).to(torch.int64).argmax(dim=-1)
    ranks = ranks[preds.mask()]
    return np.bincount(ranks.numpy(), minlength=preds.num_classes).astype(np.int64)


def evaluate_model(
    model: nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    *,
    excluded: Sequence[int] = (),
    batch_size: int = 32,
) -> tuple[EvalReport, np.ndarray]:
    """Full report for a labelled split plus the argmax label maps."""
    probs = predict_probs(model, torch.from_numpy(np.ascontiguousarray(images)), batch_size=batch_size)
    preds = SoftmaxMap(probs=probs)
    predictions = probs.argmax(dim=-1).numpy()
    report = compute_iou(accumulate_confusion(predictions, labels, num_classes), excluded)
    report.per_class_prediction_mass = class_mass_diagnostics(predictions, num_classes)
    report.rank_histogram = rank_histogram(preds, labels)
    return report, predictions.astype(np.uint8)
