"""Class-balanced pseudo-label selection, complementary-label sampling and the LD losses.

Every function here is a pure function of prediction tensors laid out channels-last as
``(batch, height, width, classes)``. Losses are built from torch operations so the gradient
with respect to the logits a :class:`SoftmaxMap` was computed from is available through
autograd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError, InputError
from .utils import selection_count

EPS_LOG = 1e-7
SENTINEL_UNSELECTABLE = 2.0
_SUM_TOLERANCE = 1e-5


@dataclass(slots=True)
class SoftmaxMap:
    """Per-pixel class probabilities for a batch of images."""

    probs: torch.Tensor
    valid_mask: torch.Tensor | None = None
    logits: torch.Tensor | None = None

    @classmethod
    def from_logits(cls, logits: torch.Tensor, valid_mask: torch.Tensor | None = None) -> SoftmaxMap:
        return cls(probs=torch.softmax(logits, dim=-1), valid_mask=valid_mask, logits=logits)

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[-1])

    @property
    def pixel_shape(self) -> Tuple[int, int, int]:
        batch, height, width, _ = self.probs.shape
        return int(batch), int(height), int(width)

    def mask(self) -> torch.Tensor:
        if self.valid_mask is None:
            return torch.ones(self.pixel_shape, dtype=torch.bool, device=self.probs.device)
        return self.valid_mask

    def validate(self) -> SoftmaxMap:
        if self.probs.dim() != 4:
            raise InputError(f"probs must have shape (B, H, W, C), got {tuple(self.probs.shape)}")
        if self.num_classes < 3:
            raise InputError(f"at least 3 classes are required, got {self.num_classes}")
        if self.valid_mask is not None and tuple(self.valid_mask.shape) != self.pixel_shape:
            raise InputError(
                f"valid_mask shape {tuple(self.valid_mask.shape)} does not match {self.pixel_shape}"
            )
        with torch.no_grad():
            probs = self.probs.detach()
            if not torch.isfinite(probs).all():
                raise InputError("probabilities contain non-finite values")
            if probs.min() < 0 or probs.max() > 1:
                raise InputError("probabilities must lie in [0, 1]")
            mask = self.mask()
            if mask.any():
                drift = (probs.sum(dim=-1)[mask] - 1.0).abs().max()
                if drift > _SUM_TOLERANCE:
                    raise InputError(f"probabilities must sum to 1 per pixel (max drift {float(drift):.2e})")
        return self

    def detach(self) -> SoftmaxMap:
        return SoftmaxMap(probs=self.probs.detach(), valid_mask=self.valid_mask)

    def argmax(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pseudo labels (ties go to the lowest class index) and their confidences."""
        probs = self.probs.detach()
        labels = probs.argmax(dim=-1)
        confidences = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
        return labels, confidences


@dataclass(slots=True)
class ClassThresholds:
    delta: torch.Tensor
    alpha: float
    assigned_counts: torch.Tensor

    def selectable(self) -> torch.Tensor:
        return self.delta <= 1.0


@dataclass(slots=True)
class PseudoLabelSelection:
    pseudo_labels: torch.Tensor
    selected: torch.Tensor
    confidences: torch.Tensor

    def subset(self, indices: Sequence[int] | torch.Tensor) -> PseudoLabelSelection:
        index = torch.as_tensor(indices, dtype=torch.long)
        return PseudoLabelSelection(
            pseudo_labels=self.pseudo_labels[index],
            selected=self.selected[index],
            confidences=self.confidences[index],
        )

    def selected_per_class(self, num_classes: int) -> torch.Tensor:
        return torch.bincount(self.pseudo_labels[self.selected].flatten(), minlength=num_classes)


@dataclass(slots=True)
class ComplementaryLabelMap:
    comp_labels: torch.Tensor
    ranks: torch.Tensor
    epsilon: int
    mode: str = "symmetric"


@dataclass(slots=True)
class LossValue:
    """A scalar loss plus the logits it can be differentiated against."""

    value: torch.Tensor
    logits: torch.Tensor | None = None

    def item(self) -> float:
        return float(self.value.detach())

    def gradient_wrt_logits(self) -> torch.Tensor | None:
        if self.logits is None:
            return None
        if not self.value.requires_grad:
            return torch.zeros_like(self.logits)
        (grad,) = torch.autograd.grad(self.value, self.logits, retain_graph=True, allow_unused=True)
        return torch.zeros_like(self.logits) if grad is None else grad

    def scaled(self, weight: float) -> LossValue:
        return LossValue(value=self.value * weight, logits=self.logits)

    def __add__(self, other: LossValue) -> LossValue:
        return LossValue(value=self.value + other.value, logits=self.logits if self.logits is not None else other.logits)


def _check_pixels(preds: SoftmaxMap, tensor: torch.Tensor, what: str) -> None:
    if tuple(tensor.shape) != preds.pixel_shape:
        raise InputError(f"{what} shape {tuple(tensor.shape)} does not match predictions {preds.pixel_shape}")


def _reduce(per_pixel: torch.Tensor, mask: torch.Tensor, reduction: str) -> torch.Tensor:
    weights = mask.to(per_pixel.dtype)
    total = (per_pixel * weights).sum()
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ConfigError(f"reduction must be 'mean' or 'sum', got '{reduction}'")
    count = weights.sum()
    if count == 0:
        return total * 0.0
    return total / count


def safe_log(values: torch.Tensor) -> torch.Tensor:
    return torch.log(values.clamp(min=EPS_LOG, max=1.0))


def compute_class_thresholds(preds: SoftmaxMap, alpha: float) -> ClassThresholds:
    """Per-class cutoffs at the ``ceil(alpha * N_c)``-th largest argmax confidence.

    Only pixels whose argmax is ``c`` contribute to class ``c``. Classes without any such
    pixel get :data:`SENTINEL_UNSELECTABLE`, which no probability can reach.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    preds.validate()
    mask = preds.mask()
    if not mask.any():
        raise InputError("threshold computation needs at least one valid pixel")

    labels, confidences = preds.argmax()
    labels = labels[mask]
    confidences = confidences[mask]
    num_classes = preds.num_classes
    counts = torch.bincount(labels, minlength=num_classes)
    delta = torch.full((num_classes,), SENTINEL_UNSELECTABLE, dtype=confidences.dtype)
    for cls in range(num_classes):
        assigned = int(counts[cls])
        if assigned == 0:
            continue
        k = selection_count(alpha, assigned)
        delta[cls] = torch.topk(confidences[labels == cls], k).values[-1]
    return ClassThresholds(delta=delta, alpha=alpha, assigned_counts=counts)


def select_pseudo_labels(preds: SoftmaxMap, thresholds: ClassThresholds) -> PseudoLabelSelection:
    if thresholds.delta.numel() != preds.num_classes:
        raise InputError(
            f"thresholds cover {thresholds.delta.numel()} classes but predictions have {preds.num_classes}"
        )
    labels, confidences = preds.argmax()
    delta = thresholds.delta.to(device=confidences.device, dtype=confidences.dtype)
    selected = (confidences >= delta[labels]) & preds.mask()
    return PseudoLabelSelection(pseudo_labels=labels, selected=selected, confidences=confidences)


def loss_sce(preds: SoftmaxMap, sel: PseudoLabelSelection, reduction: str = "mean") -> LossValue:
    """Cross-entropy against the pseudo labels at the selected pixels (0 if none selected)."""
    _check_pixels(preds, sel.pseudo_labels, "pseudo_labels")
    _check_pixels(preds, sel.selected, "selection mask")
    picked = preds.probs.gather(-1, sel.pseudo_labels.unsqueeze(-1)).squeeze(-1)
    value = _reduce(-safe_log(picked), sel.selected & preds.mask(), reduction)
    return LossValue(value=value, logits=preds.logits)


def pixel_entropy(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * safe_log(probs)).sum(dim=-1)


def loss_ent(preds: SoftmaxMap, reduction: str = "mean") -> LossValue:
    value = _reduce(pixel_entropy(preds.probs), preds.mask(), reduction)
    return LossValue(value=value, logits=preds.logits)


def loss_pos(
    preds: SoftmaxMap,
    sel: PseudoLabelSelection,
    lambda_ent: float,
    reduction: str = "mean",
) -> LossValue:
    return loss_sce(preds, sel, reduction) + loss_ent(preds, reduction).scaled(lambda_ent)


def hcls_rank_bounds(num_classes: int, epsilon: int, mode: str = "symmetric") -> Tuple[int, int]:
    """Inclusive range of descending softmax ranks HCLS may draw from.

    Raises :class:`ConfigError` naming the violated bound.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    if mode == "uniform":
        if num_classes < 2:
            raise ConfigError("uniform complementary labels need at least 2 classes")
        return 2, num_classes
    center = num_classes // 2
    if mode not in ("symmetric", "lower"):
        raise ConfigError(f"Unknown hcls mode '{mode}'")
    if center - epsilon < 2:
        raise ConfigError(
            f"HCLS lower bound violated: floor(C/2) - epsilon = {center} - {epsilon} < 2 "
            f"(C={num_classes}); the sampled rank could hit the pseudo label"
        )
    if mode == "lower":
        return center - epsilon, center
    if epsilon > num_classes - 1 - center:
        raise ConfigError(
            f"HCLS upper bound violated: epsilon = {epsilon} > C - 1 - floor(C/2) = {num_classes - 1 - center} "
            f"(C={num_classes})"
        )
    return center - epsilon, center + epsilon


def effective_epsilon(num_classes: int, epsilon: int, mode: str = "symmetric", min_rank: int = 2) -> int:
    """Largest epsilon not above the requested one that satisfies the HCLS bounds.

    ``min_rank`` is the smallest rank the band may start at whenever some epsilon allows it;
    otherwise the plain bounds decide. Uniform mode ignores it.
    """
    floors = (min_rank, 2) if mode != "uniform" and min_rank > 2 else (2,)
    for floor in floors:
        for candidate in range(epsilon, -1, -1):
            try:
                low, _ = hcls_rank_bounds(num_classes, candidate, mode)
            except ConfigError:
                continue
            if low >= floor:
                return candidate
    hcls_rank_bounds(num_classes, 0, mode)
    return 0


def hcls_sample(
    preds: SoftmaxMap,
    epsilon: int,
    rng_seed: int,
    *,
    mode: str = "symmetric",
    image_ids: Sequence[int] | None = None,
) -> ComplementaryLabelMap:
    """Draw one complementary label per pixel from the body of its sorted softmax output.

    Each image reads its ranks from a generator keyed by ``(rng_seed, image_id)`` so the
    result does not depend on how a split is batched or in which order it is processed.
    """
    if rng_seed < 0:
        raise ConfigError(f"rng_seed must be non-negative, got {rng_seed}")
    batch, height, width = preds.pixel_shape
    low, high = hcls_rank_bounds(preds.num_classes, epsilon, mode)
    ids = list(range(batch)) if image_ids is None else [int(value) for value in image_ids]
    if len(ids) != batch:
        raise InputError(f"{len(ids)} image ids given for a batch of {batch}")

    ranks = np.empty((batch, height, width), dtype=np.int64)
    for row, image_id in enumerate(ids):
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, image_id]))
        ranks[row] = rng.integers(low, high + 1, size=(height, width))

    probs = preds.probs.detach()
    order = torch.argsort(-probs, dim=-1, stable=True)
    rank_tensor = torch.from_numpy(ranks).to(order.device)
    comp_labels = order.gather(-1, (rank_tensor - 1).unsqueeze(-1)).squeeze(-1)
    return ComplementaryLabelMap(comp_labels=comp_labels, ranks=rank_tensor, epsilon=epsilon, mode=mode)


def loss_neg(preds: SoftmaxMap, comp: ComplementaryLabelMap, reduction: str = "mean") -> LossValue:
    """``-log(1 - p[comp])`` over all valid pixels."""
    _check_pixels(preds, comp.comp_labels, "comp_labels")
    picked = preds.probs.gather(-1, comp.comp_labels.unsqueeze(-1)).squeeze(-1)
    value = _reduce(-safe_log(1.0 - picked), preds.mask(), reduction)
    return LossValue(value=value, logits=preds.logits)


def loss_ld(
    preds: SoftmaxMap,
    sel: PseudoLabelSelection,
    comp: ComplementaryLabelMap,
    lambda_ent: float,
    lambda_neg: float,
    reduction: str = "mean",
) -> LossValue:
    positive = loss_pos(preds, sel, lambda_ent, reduction)
    return positive + loss_neg(preds, comp, reduction).scaled(lambda_neg)
