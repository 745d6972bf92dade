"""Comparison objectives for source-free adaptation.

Each baseline recomputes its pseudo labels from the current predictions at every step;
unlike LD there is no epoch-level cache.
"""
from __future__ import annotations

import torch

from .denoise import (
    LossValue,
    PseudoLabelSelection,
    SoftmaxMap,
    safe_log,
    loss_ent,
    loss_sce,
)
from .errors import ConfigError
from .models import BaselineSpec


def _argmax_selection(preds: SoftmaxMap, threshold: float | None = None) -> PseudoLabelSelection:
    labels, confidences = preds.argmax()
    selected = preds.mask()
    if threshold is not None:
        selected = selected & (confidences >= threshold)
    return PseudoLabelSelection(pseudo_labels=labels, selected=selected, confidences=confidences)


def pseudo_label_loss(preds: SoftmaxMap, reduction: str = "mean") -> LossValue:
    return loss_sce(preds, _argmax_selection(preds), reduction)


def selected_pseudo_label_loss(preds: SoftmaxMap, threshold: float, reduction: str = "mean") -> LossValue:
    return loss_sce(preds, _argmax_selection(preds, threshold), reduction)


def marginal_entropy(preds: SoftmaxMap) -> torch.Tensor:
    """Entropy of the class distribution averaged over the valid pixels of the batch."""
    mask = preds.mask().to(preds.probs.dtype).unsqueeze(-1)
    count = mask.sum().clamp(min=1.0)
    marginal = (preds.probs * mask).sum(dim=(0, 1, 2)) / count
    return -(marginal * safe_log(marginal)).sum()


def information_maximization_loss(preds: SoftmaxMap, diversity_weight: float, reduction: str = "mean") -> LossValue:
    diversity = marginal_entropy(preds)
    entropy = loss_ent(preds, reduction)
    return LossValue(value=entropy.value - diversity_weight * diversity, logits=preds.logits)


def baseline_loss(spec: BaselineSpec, preds: SoftmaxMap, reduction: str = "mean") -> LossValue:
    kind = spec.kind
    if kind == "entmin":
        return loss_ent(preds, reduction)
    if kind == "pseudo":
        return pseudo_label_loss(preds, reduction)
    if kind == "pseudo_ent":
        return pseudo_label_loss(preds, reduction) + loss_ent(preds, reduction).scaled(spec.tradeoff)
    if kind == "pseudo_sel":
        return selected_pseudo_label_loss(preds, spec.confidence_threshold, reduction)
    if kind == "shot_im":
        return information_maximization_loss(preds, spec.diversity_weight, reduction)
    raise ConfigError(f"Unknown baseline '{kind}'")
