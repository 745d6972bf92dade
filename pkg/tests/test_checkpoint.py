"""Tests for checkpoint persistence."""
from pathlib import Path

import pytest
import torch

from labeldenoise.core.checkpoint import (
    Checkpoint,
    checkpoint_digest,
    clone_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from labeldenoise.core.errors import CheckpointError
from labeldenoise.core.network import ArchitectureSpec, build_model


def _checkpoint(num_classes: int = 5, seed: int = 0) -> Checkpoint:
    spec = ArchitectureSpec(num_classes=num_classes, widths=[8, 16])
    return Checkpoint(
        model=build_model(spec, seed=seed),
        architecture=spec,
        stage="source-pretrained",
        epoch=7,
        config_hash="abc123",
        rng_state=b"\x01\x02\x03",
        metrics={"final_loss": 0.5},
    )


def _fixed_images() -> torch.Tensor:
    return torch.rand(2, 12, 12, 3, generator=torch.Generator().manual_seed(1))


def test_round_trip_reproduces_forward_outputs(tmp_path: Path) -> None:
    original = _checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(original, path)

    loaded = load_checkpoint(path)

    assert torch.equal(loaded.model(_fixed_images()), original.model(_fixed_images()))
    assert loaded.epoch == 7
    assert loaded.stage == "source-pretrained"
    assert loaded.config_hash == "abc123"
    assert loaded.rng_state == b"\x01\x02\x03"
    assert loaded.metrics == {"final_loss": 0.5}
    assert loaded.architecture == original.architecture


def test_file_starts_with_the_format_version(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(), path)
    assert path.read_bytes()[0] == 1


def test_class_count_mismatch_names_both_counts(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(num_classes=5), path)
    with pytest.raises(CheckpointError, match="expected C=8, found C=5"):
        load_checkpoint(path, expected_num_classes=8)


def test_config_hash_mismatch(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(), path)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, expected_config_hash="other")


def test_corrupt_payload_is_reported_with_the_config_hash(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(), path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="abc123"):
        load_checkpoint(path)


def test_truncated_and_missing_files(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_unknown_version_and_stage(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(_checkpoint(), path)
    raw = bytearray(path.read_bytes())
    raw[0] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(path)

    bad = _checkpoint()
    bad.stage = "finetuned"
    with pytest.raises(CheckpointError):
        save_checkpoint(bad, tmp_path / "bad.ckpt")


def test_clone_is_independent() -> None:
    original = _checkpoint()
    clone = clone_checkpoint(original)
    with torch.no_grad():
        for parameter in clone.model.parameters():
            parameter.add_(1.0)
    assert not torch.equal(clone.model(_fixed_images()), original.model(_fixed_images()))
    assert clone.metrics == original.metrics


def test_saving_twice_gives_identical_bytes(tmp_path: Path) -> None:
    checkpoint = _checkpoint()
    save_checkpoint(checkpoint, tmp_path / "a.ckpt")
    save_checkpoint(checkpoint, tmp_path / "b.ckpt")
    assert checkpoint_digest(tmp_path / "a.ckpt") == checkpoint_digest(tmp_path / "b.ckpt")
