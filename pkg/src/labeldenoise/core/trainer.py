"""Two-stage protocol: supervised source pre-training, then source-free adaptation.

Adaptation only ever sees a :class:`~labeldenoise.core.dataset_io.TargetImages` view, so
neither source scenes nor target labels are reachable from this code path.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .baselines import baseline_loss, marginal_entropy, pseudo_label_loss, selected_pseudo_label_loss
from .checkpoint import Checkpoint, clone_checkpoint, save_checkpoint
from .config_io import config_hash
from .dataset_io import SceneDataset, TargetImages
from .denoise import (
    ClassThresholds,
    PseudoLabelSelection,
    SoftmaxMap,
    compute_class_thresholds,
    effective_epsilon,
    hcls_rank_bounds,
    hcls_sample,
    loss_ent,
    loss_neg,
    loss_sce,
    select_pseudo_labels,
)
from .errors import ConfigError, DatasetError, InputError, TrainingDivergedError
from .evaluation import evaluate_model
from .models import AdaptationConfig
from .network import ArchitectureSpec, predict_probs
from .utils import ensure_directory

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "iter", "lr", "L_sce", "L_ent", "L_neg", "L_total", "L_div")


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float) -> float:
    if max_iter <= 0 or not 0 <= iteration <= max_iter:
        raise InputError(f"poly_lr needs 0 <= iter <= max_iter, got iter={iteration}, max_iter={max_iter}")
    return lr0 * (1.0 - iteration / max_iter) ** power


@dataclass(slots=True)
class StepRecord:
    epoch: int
    iter: int
    lr: float
    L_sce: float = 0.0
    L_ent: float = 0.0
    L_neg: float = 0.0
    L_total: float = 0.0
    L_div: float = 0.0


class MetricsLog:
    """Per-step loss components, kept in memory and optionally streamed to a CSV file."""

    def __init__(self, path: Path | None = None) -> None:
        self.rows: List[StepRecord] = []
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as handle:
                csv.writer(handle).writerow(METRICS_COLUMNS)

    def append(self, record: StepRecord) -> None:
        self.rows.append(record)
        if self.path is not None:
            with self.path.open("a", newline="") as handle:
                csv.writer(handle).writerow([getattr(record, column) for column in METRICS_COLUMNS])

    def epoch_mean(self, epoch: int, column: str) -> float:
        values = [getattr(row, column) for row in self.rows if row.epoch == epoch]
        return float(np.mean(values)) if values else 0.0


@dataclass(slots=True)
class EpochState:
    epoch: int
    learning_rate: float
    thresholds: ClassThresholds | None = None
    selection: PseudoLabelSelection | None = None
    selected_fraction: List[float] = field(default_factory=list)


EpochMonitor = Callable[[EpochState, nn.Module], None]


def augment_batch(
    images: torch.Tensor,
    targets: Sequence[torch.Tensor],
    rng: np.random.Generator,
    *,
    hflip: bool = True,
    full: bool = False,
) -> Tuple[torch.Tensor, List[torch.Tensor], torch.Tensor]:
    """Apply the same geometric augmentation to images ``(B, H, W, 3)`` and per-pixel targets.

    Returns the augmented images, targets and a validity mask that is false on padding.
    """
    batch, height, width, _ = images.shape
    targets = list(targets)
    valid = torch.ones((batch, height, width), dtype=torch.bool)
    if full:
        scale = rng.uniform(0.5, 1.5)
        size = (max(4, round(height * scale)), max(4, round(width * scale)))
        resized = F.interpolate(images.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=False)
        images = resized.permute(0, 2, 3, 1)
        targets = [_resize_nearest(target, size) for target in targets]
        valid = torch.ones((batch, *size), dtype=torch.bool)
        offsets = (int(rng.integers(0, abs(size[0] - height) + 1)), int(rng.integers(0, abs(size[1] - width) + 1)))
        images = _fit(images, size, (height, width), offsets, 0.0)
        targets = [_fit(target, size, (height, width), offsets, 0) for target in targets]
        valid = _fit(valid, size, (height, width), offsets, False)
    if hflip:
        flips = torch.from_numpy(rng.random(batch) < 0.5)
        images = torch.where(flips[:, None, None, None], images.flip(2), images)
        targets = [torch.where(flips[:, None, None], target.flip(2), target) for target in targets]
        valid = torch.where(flips[:, None, None], valid.flip(2), valid)
    return images.contiguous(), targets, valid


def _resize_nearest(target: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    resized = F.interpolate(target[:, None].to(torch.float32), size=size, mode="nearest")[:, 0]
    if target.is_floating_point():
        return resized.to(target.dtype)
    return resized.round().to(target.dtype)


def _fit(
    tensor: torch.Tensor,
    size: Tuple[int, int],
    out_size: Tuple[int, int],
    offsets: Tuple[int, int],
    fill: float | int | bool,
) -> torch.Tensor:
    """Crop (when larger) or pad (when smaller) spatial dims 1 and 2 to ``out_size``."""
    canvas = torch.full((tensor.shape[0], *out_size, *tensor.shape[3:]), fill, dtype=tensor.dtype)
    src, dst, span = [], [], []
    for axis in range(2):
        if size[axis] >= out_size[axis]:
            src.append(offsets[axis])
            dst.append(0)
            span.append(out_size[axis])
        else:
            src.append(0)
            dst.append(offsets[axis])
            span.append(size[axis])
    canvas[:, dst[0] : dst[0] + span[0], dst[1] : dst[1] + span[1]] = tensor[
        :, src[0] : src[0] + span[0], src[1] : src[1] + span[1]
    ]
    return canvas


def _check_finite(value: torch.Tensor, stage: str, epoch: int, iteration: int) -> None:
    if not torch.isfinite(value):
        raise TrainingDivergedError(
            f"{stage} loss became non-finite ({float(value)}) at epoch {epoch}, iteration {iteration}; "
            "try a smaller learning rate"
        )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _make_optimizer(model: nn.Module, lr: float, config: AdaptationConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)


def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor, valid: torch.Tensor, reduction: str) -> torch.Tensor:
    per_pixel = F.cross_entropy(logits.permute(0, 3, 1, 2), labels, reduction="none")
    total = per_pixel[valid].sum()
    return total if reduction == "sum" else total / valid.sum().clamp(min=1)


@torch.no_grad()
def _split_cross_entropy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int) -> float:
    probs = predict_probs(model, images, batch_size=batch_size)
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return float(-torch.log(picked.clamp(min=1e-12)).mean())


def _architecture_of(model: nn.Module, architecture: ArchitectureSpec | None) -> ArchitectureSpec:
    if architecture is not None:
        return architecture
    spec = getattr(model, "spec", None)
    if not isinstance(spec, ArchitectureSpec):
        raise ConfigError("pass the architecture spec for models that do not carry one")
    return spec


def _rng_state() -> bytes:
    return torch.get_rng_state().numpy().tobytes()


def source_pretrain(
    model: nn.Module,
    source_dataset: SceneDataset,
    config: AdaptationConfig,
    *,
    eval_dataset: SceneDataset | None = None,
    run_dir: Path | None = None,
    architecture: ArchitectureSpec | None = None,
) -> Checkpoint:
    """Supervised cross-entropy training on labelled source scenes."""
    config.validate()
    spec = _architecture_of(model, architecture)
    source_labels = source_dataset.require_labels("source pre-training")
    if source_dataset.num_classes != spec.num_classes:
        raise ConfigError(f"source data has C={source_dataset.num_classes}, model has C={spec.num_classes}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    images = torch.from_numpy(np.ascontiguousarray(source_dataset.images))
    labels = torch.from_numpy(source_labels.astype(np.int64))
    count = len(source_dataset)
    batches_per_epoch = math.ceil(count / config.batch_size)
    max_iter = max(1, config.source_epochs * batches_per_epoch)
    optimizer = _make_optimizer(model, config.source_lr0, config)
    log = MetricsLog(run_dir / "source_metrics.csv" if run_dir is not None else None)

    initial_loss = _split_cross_entropy(model, images, labels, config.eval_batch_size)
    logger.info("source pre-training: %d scenes, %d epochs, initial loss %.4f", count, config.source_epochs, initial_loss)
    iteration = 0
    for epoch in range(1, config.source_epochs + 1):
        model.train()
        order = rng.permutation(count)
        for start in range(0, count, config.batch_size):
            index = order[start : start + config.batch_size]
            lr = poly_lr(iteration, max_iter, config.source_lr0, config.poly_power)
            _set_lr(optimizer, lr)
            batch_images, (batch_labels,), valid = augment_batch(
                images[index], [labels[index]], rng, hflip=config.hflip, full=config.full_augmentation
            )
            loss = _cross_entropy(model(batch_images), batch_labels, valid, config.loss_reduction)
            _check_finite(loss, "source", epoch, iteration)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append(StepRecord(epoch=epoch, iter=iteration, lr=lr, L_sce=loss.item(), L_total=loss.item()))
            iteration += 1
        logger.info("source epoch %d/%d: loss %.4f", epoch, config.source_epochs, log.epoch_mean(epoch, "L_total"))
        if run_dir is not None:
            _save_epoch(run_dir, "source", model, spec, "source-pretrained", epoch, config)

    metrics = {"initial_loss": initial_loss, "final_loss": _split_cross_entropy(model, images, labels, config.eval_batch_size)}
    if eval_dataset is not None:
        report, _ = evaluate_model(
            model,
            eval_dataset.images,
            eval_dataset.require_labels("held-out source evaluation"),
            spec.num_classes,
            batch_size=config.eval_batch_size,
        )
        metrics["source_eval_miou"] = report.miou
        logger.info("held-out source mIoU %.4f", report.miou)
    return Checkpoint(
        model=model,
        architecture=spec,
        stage="source-pretrained",
        epoch=config.source_epochs,
        config_hash=config_hash(config),
        rng_state=_rng_state(),
        metrics=metrics,
    )


def _save_epoch(
    run_dir: Path,
    prefix: str,
    model: nn.Module,
    spec: ArchitectureSpec,
    stage: str,
    epoch: int,
    config: AdaptationConfig,
) -> None:
    directory = run_dir / "checkpoints"
    ensure_directory(directory)
    save_checkpoint(
        Checkpoint(model=model, architecture=spec, stage=stage, epoch=epoch, config_hash=config_hash(config)),
        directory / f"{prefix}_epoch_{epoch:03d}.ckpt",
    )


def resolve_epsilon(config: AdaptationConfig, num_classes: int) -> int:
    """The epsilon HCLS will actually use; checked once, before any training step."""
    if config.method != "ld" or config.disable_neg:
        return config.epsilon
    epsilon = effective_epsilon(num_classes, config.epsilon, config.hcls_mode, min_rank=config.hcls_min_rank)
    if epsilon < config.epsilon:
        low, high = hcls_rank_bounds(num_classes, epsilon, config.hcls_mode)
        logger.warning(
            "epsilon %d does not fit the HCLS rank bounds for C=%d starting at rank %d; using %d (ranks %d..%d)",
            config.epsilon,
            num_classes,
            config.hcls_min_rank,
            epsilon,
            low,
            high,
        )
    return epsilon


def _step_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _ld_objective(
    preds: SoftmaxMap,
    selection: PseudoLabelSelection,
    image_ids: np.ndarray,
    config: AdaptationConfig,
    epsilon: int,
    epoch: int,
) -> Tuple[torch.Tensor, StepRecord]:
    reduction = config.loss_reduction
    zero = preds.probs.sum() * 0.0
    sce = ent = neg = zero
    if not config.disable_pos:
        sce = loss_sce(preds, selection, reduction).value
        ent = loss_ent(preds, reduction).value
    if not config.disable_neg:
        comp = hcls_sample(
            preds, epsilon, _step_seed(config.seed, epoch), mode=config.hcls_mode, image_ids=image_ids.tolist()
        )
        neg = loss_neg(preds, comp, reduction).value
    total = sce + config.lambda_ent * ent + config.lambda_neg * neg
    record = StepRecord(epoch=epoch, iter=0, lr=0.0, L_sce=sce.item(), L_ent=ent.item(), L_neg=neg.item(), L_total=total.item())
    return total, record


def _baseline_objective(preds: SoftmaxMap, config: AdaptationConfig, epoch: int) -> Tuple[torch.Tensor, StepRecord]:
    spec = config.baseline_spec()
    reduction = config.loss_reduction
    total = baseline_loss(spec, preds, reduction).value
    record = StepRecord(epoch=epoch, iter=0, lr=0.0, L_total=total.item())
    with torch.no_grad():
        if spec.kind in ("pseudo", "pseudo_ent"):
            record.L_sce = pseudo_label_loss(preds, reduction).item()
        elif spec.kind == "pseudo_sel":
            record.L_sce = selected_pseudo_label_loss(preds, spec.confidence_threshold, reduction).item()
        if spec.kind in ("entmin", "pseudo_ent", "shot_im"):
            record.L_ent = loss_ent(preds, reduction).item()
        if spec.kind == "shot_im":
            record.L_div = float(marginal_entropy(preds))
    return total, record


def _refresh_selection(model: nn.Module, images: torch.Tensor, config: AdaptationConfig, state: EpochState) -> None:
    preds = SoftmaxMap(probs=predict_probs(model, images, batch_size=config.eval_batch_size))
    state.thresholds = compute_class_thresholds(preds, config.alpha)
    state.selection = select_pseudo_labels(preds, state.thresholds)
    assigned = state.thresholds.assigned_counts.to(torch.float64)
    selected = state.selection.selected_per_class(preds.num_classes).to(torch.float64)
    state.selected_fraction = (selected / assigned.clamp(min=1.0)).tolist()


def run_adaptation(
    checkpoint: Checkpoint,
    target_train: TargetImages,
    config: AdaptationConfig,
    *,
    run_dir: Path | None = None,
    log: MetricsLog | None = None,
    monitor: EpochMonitor | None = None,
) -> Checkpoint:
    """Source-free adaptation with LD or one of the baseline objectives.

    Pseudo labels and thresholds are refreshed once at the start of every epoch with the
    current model, then reused for every batch of that epoch.
    """
    config.validate()
    if checkpoint.stage != "source-pretrained":
        raise ConfigError(f"adaptation starts from a source-pretrained checkpoint, got stage '{checkpoint.stage}'")
    if config.adapt_epochs == 0:
        return checkpoint
    num_classes = checkpoint.num_classes
    if config.num_classes != num_classes:
        raise ConfigError(f"config describes C={config.num_classes} but the checkpoint has C={num_classes}")
    if len(target_train) == 0:
        raise DatasetError("adaptation needs at least one target image")
    epsilon = resolve_epsilon(config, num_classes)

    adapted = clone_checkpoint(checkpoint)
    model = adapted.model
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 202]))
    images = torch.from_numpy(np.ascontiguousarray(target_train.all()))
    count = len(target_train)
    batches_per_epoch = math.ceil(count / config.batch_size)
    max_iter = config.adapt_epochs * batches_per_epoch
    optimizer = _make_optimizer(model, config.lr0, config)
    if log is None:
        log = MetricsLog(run_dir / "metrics.csv" if run_dir is not None else None)

    logger.info(
        "adapting with method=%s (disable_pos=%s, disable_neg=%s) on %d target images for %d epochs",
        config.method,
        config.disable_pos,
        config.disable_neg,
        count,
        config.adapt_epochs,
    )
    iteration = 0
    for epoch in range(1, config.adapt_epochs + 1):
        state = EpochState(epoch=epoch, learning_rate=poly_lr(iteration, max_iter, config.lr0, config.poly_power))
        if config.method == "ld":
            _refresh_selection(model, images, config, state)
        model.train()
        order = rng.permutation(count)
        for start in range(0, count, config.batch_size):
            index = order[start : start + config.batch_size]
            lr = poly_lr(iteration, max_iter, config.lr0, config.poly_power)
            _set_lr(optimizer, lr)
            if state.selection is not None:
                batch_selection = state.selection.subset(index)
                targets = [batch_selection.pseudo_labels, batch_selection.selected, batch_selection.confidences]
            else:
                targets = []
            batch_images, targets, valid = augment_batch(
                images[index], targets, rng, hflip=config.hflip, full=config.full_augmentation
            )
            preds = SoftmaxMap.from_logits(model(batch_images), valid_mask=valid)
            if state.selection is not None:
                selection = PseudoLabelSelection(
                    pseudo_labels=targets[0], selected=targets[1] & valid, confidences=targets[2]
                )
                total, record = _ld_objective(preds, selection, index, config, epsilon, epoch)
            else:
                total, record = _baseline_objective(preds, config, epoch)
            _check_finite(total, "adaptation", epoch, iteration)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            record.iter = iteration
            record.lr = lr
            log.append(record)
            iteration += 1

        logger.info(
            "epoch %d/%d: L_sce %.4f L_ent %.4f L_neg %.4f L_total %.4f",
            epoch,
            config.adapt_epochs,
            log.epoch_mean(epoch, "L_sce"),
            log.epoch_mean(epoch, "L_ent"),
            log.epoch_mean(epoch, "L_neg"),
            log.epoch_mean(epoch, "L_total"),
        )
        if state.selected_fraction:
            logger.debug("selected fraction per class: %s", ", ".join(f"{value:.2f}" for value in state.selected_fraction))
        if run_dir is not None:
            _save_epoch(run_dir, "adapt", model, adapted.architecture, "adapted", epoch, config)
        if monitor is not None:
            monitor(state, model)

    adapted.stage = "adapted"
    adapted.epoch = config.adapt_epochs
    adapted.config_hash = config_hash(config)
    adapted.rng_state = _rng_state()
    adapted.metrics = {
        "final_L_total": log.epoch_mean(config.adapt_epochs, "L_total"),
        "final_L_sce": log.epoch_mean(config.adapt_epochs, "L_sce"),
        "final_L_ent": log.epoch_mean(config.adapt_epochs, "L_ent"),
        "final_L_neg": log.epoch_mean(config.adapt_epochs, "L_neg"),
    }
    return adapted
