"""Tests for source pre-training, adaptation and the schedule helpers."""
import csv
import logging
import math
from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch

from labeldenoise.core.checkpoint import Checkpoint, checkpoint_digest, save_checkpoint
from labeldenoise.core.dataset_io import SceneDataset
from labeldenoise.core.denoise import hcls_rank_bounds
from labeldenoise.core.errors import ConfigError, DatasetError, InputError, TrainingDivergedError
from labeldenoise.core.models import AdaptationConfig
from labeldenoise.core.network import ArchitectureSpec, build_model
from labeldenoise.core.synthshift import default_domain_spec, default_target_spec, generate_dataset
from labeldenoise.core.trainer import (
    METRICS_COLUMNS,
    EpochState,
    MetricsLog,
    StepRecord,
    augment_batch,
    poly_lr,
    resolve_epsilon,
    run_adaptation,
    source_pretrain,
)

CLASSES = 4


def _source() -> SceneDataset:
    return generate_dataset(default_domain_spec(CLASSES, seed=0, height=16, width=16), 8)


def _target() -> SceneDataset:
    source_spec = default_domain_spec(CLASSES, seed=0, height=16, width=16)
    return generate_dataset(default_target_spec(source_spec, seed=1), 6)


def _config(**overrides) -> AdaptationConfig:
    values = dict(num_classes=CLASSES, batch_size=4, eval_batch_size=8, source_epochs=2, adapt_epochs=2, lr0=1e-2)
    values.update(overrides)
    return AdaptationConfig(**values)


def _checkpoint(seed: int = 0) -> Checkpoint:
    spec = ArchitectureSpec(num_classes=CLASSES, widths=[8, 8])
    return Checkpoint(model=build_model(spec, seed=seed), architecture=spec, stage="source-pretrained")


def _state(model: torch.nn.Module) -> List[torch.Tensor]:
    return [tensor.detach().clone() for tensor in model.state_dict().values()]


def test_poly_lr_schedule() -> None:
    assert poly_lr(0, 100, 0.01, 0.9) == 0.01
    assert poly_lr(100, 100, 0.01, 0.9) == 0.0
    assert poly_lr(50, 100, 0.01, 1.0) == pytest.approx(0.005)
    assert poly_lr(25, 100, 1.0, 0.9) == pytest.approx(0.75**0.9)
    with pytest.raises(InputError):
        poly_lr(101, 100, 0.01, 0.9)
    with pytest.raises(InputError):
        poly_lr(-1, 100, 0.01, 0.9)


def test_metrics_log_streams_csv_rows(tmp_path: Path) -> None:
    path = tmp_path / "run" / "metrics.csv"
    log = MetricsLog(path)
    log.append(StepRecord(epoch=1, iter=0, lr=0.1, L_sce=1.0, L_total=1.0))
    log.append(StepRecord(epoch=1, iter=1, lr=0.05, L_sce=3.0, L_total=3.0))

    with path.open(newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert METRICS_COLUMNS[:7] == ("epoch", "iter", "lr", "L_sce", "L_ent", "L_neg", "L_total")
    assert METRICS_COLUMNS[-1] == "L_div"
    assert len(rows) == 3
    assert log.epoch_mean(1, "L_sce") == 2.0
    assert log.epoch_mean(2, "L_sce") == 0.0


def test_horizontal_flip_moves_images_and_targets_together() -> None:
    generator = torch.Generator().manual_seed(0)
    images = torch.rand(6, 8, 10, 3, generator=generator)
    labels = (images[..., 0] > 0.5).long()
    weights = images[..., 1].clone()

    out_images, (out_labels, out_weights), valid = augment_batch(
        images, [labels, weights], np.random.default_rng(3), hflip=True
    )

    assert out_images.shape == images.shape
    assert torch.equal(out_labels, (out_images[..., 0] > 0.5).long())
    assert torch.equal(out_weights, out_images[..., 1])
    assert bool(valid.all())


def test_full_augmentation_keeps_shapes_and_marks_padding() -> None:
    generator = torch.Generator().manual_seed(1)
    images = torch.rand(3, 12, 12, 3, generator=generator) + 0.1
    labels = torch.randint(1, 4, (3, 12, 12), generator=generator)
    confidences = torch.rand(3, 12, 12, generator=generator, dtype=torch.float64)

    for seed in range(8):
        out_images, (out_labels, out_conf), valid = augment_batch(
            images, [labels, confidences], np.random.default_rng(seed), full=True
        )
        assert out_images.shape == images.shape
        assert out_labels.shape == labels.shape and out_labels.dtype == labels.dtype
        assert out_conf.dtype == torch.float64
        assert valid.dtype == torch.bool
        assert set(out_labels[valid].unique().tolist()) <= {1, 2, 3}
        assert bool((out_labels[~valid] == 0).all())
        assert bool((out_images[~valid] == 0).all())


def test_resolve_epsilon_warns_when_reduced(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING, logger="labeldenoise.core.trainer"):
        assert resolve_epsilon(_config(epsilon=3), CLASSES) == 0
    assert "does not fit the HCLS rank bounds" in caplog.text

    caplog.clear()
    assert resolve_epsilon(_config(epsilon=3), 19) == 3
    assert resolve_epsilon(_config(epsilon=3, hcls_mode="lower"), 19) == 3
    assert resolve_epsilon(_config(method="entmin", epsilon=3), CLASSES) == 3
    assert caplog.text == ""


def test_default_band_skips_the_runner_up_at_eight_classes(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.WARNING, logger="labeldenoise.core.trainer"):
        epsilon = resolve_epsilon(AdaptationConfig(), 8)
    assert epsilon == 1
    assert hcls_rank_bounds(8, epsilon) == (3, 5)
    assert "ranks 3..5" in caplog.text

    assert resolve_epsilon(AdaptationConfig(hcls_min_rank=2), 8) == 2
    assert resolve_epsilon(AdaptationConfig(hcls_mode="lower"), 8) == 1
    assert resolve_epsilon(AdaptationConfig(hcls_mode="uniform"), 8) == 3
    with pytest.raises(ConfigError):
        AdaptationConfig(hcls_min_rank=1).validate()


def test_source_pretrain_with_zero_lr_changes_nothing() -> None:
    model = build_model(ArchitectureSpec(num_classes=CLASSES, widths=[8, 8]))
    before = _state(model)

    checkpoint = source_pretrain(model, _source(), _config(source_lr0=0.0, source_epochs=1))

    assert all(torch.equal(a, b) for a, b in zip(before, _state(checkpoint.model)))
    assert checkpoint.metrics["final_loss"] == checkpoint.metrics["initial_loss"]
    assert checkpoint.stage == "source-pretrained"


def test_uniform_model_starts_at_log_class_count() -> None:
    model = build_model(ArchitectureSpec(num_classes=CLASSES, widths=[8, 8]))
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.zero_()

    checkpoint = source_pretrain(model, _source(), _config(source_lr0=0.0, source_epochs=1))

    assert checkpoint.metrics["initial_loss"] == pytest.approx(math.log(CLASSES), abs=1e-5)


def test_source_pretrain_reduces_the_loss(tmp_path: Path) -> None:
    model = build_model(ArchitectureSpec(num_classes=CLASSES, widths=[8, 8]))
    checkpoint = source_pretrain(
        model,
        _source(),
        _config(source_lr0=0.05, source_epochs=10),
        eval_dataset=_source(),
        run_dir=tmp_path,
    )

    assert checkpoint.metrics["final_loss"] < checkpoint.metrics["initial_loss"]
    assert 0.0 <= checkpoint.metrics["source_eval_miou"] <= 1.0
    assert (tmp_path / "source_metrics.csv").exists()
    assert len(list((tmp_path / "checkpoints").glob("source_epoch_*.ckpt"))) == 10


def test_source_pretrain_needs_labels_and_matching_classes() -> None:
    model = build_model(ArchitectureSpec(num_classes=CLASSES, widths=[8, 8]))
    with pytest.raises(DatasetError, match="needs ground-truth labels"):
        source_pretrain(model, _source().without_labels(), _config())

    wide = build_model(ArchitectureSpec(num_classes=6, widths=[8, 8]))
    with pytest.raises(ConfigError, match="C=4"):
        source_pretrain(wide, _source(), _config())


def test_non_finite_loss_aborts_training() -> None:
    model = build_model(ArchitectureSpec(num_classes=CLASSES, widths=[8, 8]))
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="epoch 1, iteration 0"):
        source_pretrain(model, _source(), _config())


def test_zero_adaptation_epochs_returns_the_input() -> None:
    checkpoint = _checkpoint()
    assert run_adaptation(checkpoint, _target().images_only(), _config(adapt_epochs=0)) is checkpoint


def test_adaptation_rejects_a_class_count_mismatch() -> None:
    with pytest.raises(ConfigError, match="C=8"):
        run_adaptation(_checkpoint(), _target().images_only(), _config(num_classes=8))


@pytest.mark.parametrize("stage", ["adapted", "finetuned"])
def test_adaptation_starts_from_a_source_checkpoint_only(stage: str) -> None:
    checkpoint = _checkpoint()
    checkpoint.stage = stage
    with pytest.raises(ConfigError, match="source-pretrained"):
        run_adaptation(checkpoint, _target().images_only(), _config())
    with pytest.raises(ConfigError, match="source-pretrained"):
        run_adaptation(checkpoint, _target().images_only(), _config(adapt_epochs=0))


def test_adaptation_leaves_the_input_checkpoint_alone(tmp_path: Path) -> None:
    checkpoint = _checkpoint()
    before = _state(checkpoint.model)

    adapted = run_adaptation(checkpoint, _target().images_only(), _config(), run_dir=tmp_path)

    assert all(torch.equal(a, b) for a, b in zip(before, _state(checkpoint.model)))
    assert not all(torch.equal(a, b) for a, b in zip(before, _state(adapted.model)))
    assert adapted.stage == "adapted"
    assert adapted.epoch == 2
    assert sorted(path.name for path in (tmp_path / "checkpoints").iterdir()) == [
        "adapt_epoch_001.ckpt",
        "adapt_epoch_002.ckpt",
    ]
    with (tmp_path / "metrics.csv").open(newline="") as handle:
        assert len(list(csv.reader(handle))) == 1 + 2 * 2


def test_adaptation_never_depends_on_target_labels() -> None:
    target = _target()
    config = _config()
    with_labels = run_adaptation(_checkpoint(), target.images_only(), config)
    without_labels = run_adaptation(_checkpoint(), target.without_labels().images_only(), config)

    view = target.images_only()
    assert not hasattr(view, "labels")
    assert all(torch.equal(a, b) for a, b in zip(_state(with_labels.model), _state(without_labels.model)))


class _PoisonLabels:
    """Records every touch; stands in for a label array nobody may read."""

    def __init__(self) -> None:
        self.accesses: List[str] = []

    def __getattr__(self, name: str):
        self.accesses.append(name)
        raise AttributeError(name)

    def __getitem__(self, key):
        self.accesses.append("__getitem__")
        raise AssertionError("target labels were read")

    def __array__(self, *args, **kwargs):
        self.accesses.append("__array__")
        raise AssertionError("target labels were read")


def test_adaptation_never_touches_poisoned_labels() -> None:
    target = _target()
    poison = _PoisonLabels()
    poisoned = SceneDataset(spec=target.spec, images=target.images, labels=poison)

    adapted = run_adaptation(_checkpoint(), poisoned.images_only(), _config())

    assert adapted.stage == "adapted"
    assert poison.accesses == []


def test_component_accounting_matches_the_total() -> None:
    log = MetricsLog()
    config = _config(lambda_ent=0.5, lambda_neg=2.0)
    run_adaptation(_checkpoint(), _target().images_only(), config, log=log)

    assert len(log.rows) == 4
    for row in log.rows:
        assert row.L_total == pytest.approx(row.L_sce + 0.5 * row.L_ent + 2.0 * row.L_neg, abs=1e-6)


def test_ablations_zero_their_terms() -> None:
    no_neg = MetricsLog()
    run_adaptation(_checkpoint(), _target().images_only(), _config().with_ablation("no-neg"), log=no_neg)
    assert all(row.L_neg == 0.0 for row in no_neg.rows)
    assert all(row.L_total == pytest.approx(row.L_sce + row.L_ent, abs=1e-6) for row in no_neg.rows)

    no_pos = MetricsLog()
    run_adaptation(_checkpoint(), _target().images_only(), _config().with_ablation("no-pos"), log=no_pos)
    assert all(row.L_sce == 0.0 and row.L_ent == 0.0 for row in no_pos.rows)
    assert all(row.L_neg > 0.0 for row in no_pos.rows)


def test_monitor_sees_each_epoch_once() -> None:
    seen = []

    def monitor(state: EpochState, model: torch.nn.Module) -> None:
        seen.append((state.epoch, state.selection is not None, len(state.selected_fraction)))

    run_adaptation(_checkpoint(), _target().images_only(), _config(adapt_epochs=3), monitor=monitor)
    assert seen == [(1, True, CLASSES), (2, True, CLASSES), (3, True, CLASSES)]

    seen.clear()
    run_adaptation(_checkpoint(), _target().images_only(), _config(method="pseudo"), monitor=monitor)
    assert seen == [(1, False, 0), (2, False, 0)]


@pytest.mark.parametrize("method", ["entmin", "pseudo", "pseudo_ent", "pseudo_sel", "shot_im"])
def test_baseline_methods_train(method: str) -> None:
    log = MetricsLog()
    adapted = run_adaptation(_checkpoint(), _target().images_only(), _config(method=method), log=log)
    assert adapted.stage == "adapted"
    assert all(math.isfinite(row.L_total) for row in log.rows)
    assert all(row.L_neg == 0.0 for row in log.rows)


def test_same_seed_gives_identical_checkpoints(tmp_path: Path) -> None:
    target = _target()
    for name in ("a", "b"):
        adapted = run_adaptation(_checkpoint(), target.images_only(), _config(seed=11))
        save_checkpoint(adapted, tmp_path / f"{name}.ckpt")
    assert checkpoint_digest(tmp_path / "a.ckpt") == checkpoint_digest(tmp_path / "b.ckpt")
