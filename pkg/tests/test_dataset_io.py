"""Tests for dataset directories on disk."""
from pathlib import Path

import numpy as np
import pytest
import yaml

from labeldenoise.core.dataset_io import MANIFEST_NAME, read_dataset, save_dataset
from labeldenoise.core.errors import DatasetError
from labeldenoise.core.synthshift import default_domain_spec, default_target_spec, write_dataset


def _spec():
    return default_domain_spec(6, seed=3, height=16, width=24)


def test_write_then_read_is_lossless(tmp_path: Path) -> None:
    written = write_dataset(_spec(), 5, tmp_path / "data", start_index=10)
    loaded = read_dataset(tmp_path / "data", expected_spec=_spec())

    assert len(loaded) == 5
    assert loaded.start_index == 10
    for original, restored in zip(written, loaded):
        assert np.array_equal(original.image, restored.image)
        assert np.array_equal(original.labels, restored.labels)
        assert restored.index == original.index

    manifest = yaml.safe_load((tmp_path / "data" / MANIFEST_NAME).read_text())
    assert manifest["count"] == 5
    assert len(manifest["scenes"]) == 5
    assert (tmp_path / "data" / MANIFEST_NAME).read_text().startswith("# labeldenoise")


def test_images_only_split_has_no_labels(tmp_path: Path) -> None:
    write_dataset(default_target_spec(_spec()), 3, tmp_path / "target", with_labels=False)
    loaded = read_dataset(tmp_path / "target")

    assert not loaded.has_labels
    assert loaded[0].labels is None
    assert len(loaded.images_only()) == 3
    with pytest.raises(DatasetError, match="labels"):
        loaded.require_labels("evaluation")


def test_truncated_record_is_an_error(tmp_path: Path) -> None:
    write_dataset(_spec(), 2, tmp_path / "data")
    record = tmp_path / "data" / "scene_00001.bin"
    record.write_bytes(record.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="truncated"):
        read_dataset(tmp_path / "data")


def test_missing_record_and_manifest(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "nothing")
    write_dataset(_spec(), 2, tmp_path / "data")
    (tmp_path / "data" / "scene_00000.bin").unlink()
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(tmp_path / "data")


def test_tampered_manifest_spec_is_rejected(tmp_path: Path) -> None:
    write_dataset(_spec(), 2, tmp_path / "data")
    manifest_path = tmp_path / "data" / MANIFEST_NAME
    manifest = yaml.safe_load(manifest_path.read_text())
    manifest["spec"]["hue_rotation"] = 12.0
    manifest_path.write_text(yaml.safe_dump(manifest))
    with pytest.raises(DatasetError, match="hash"):
        read_dataset(tmp_path / "data")


def test_expected_spec_mismatch(tmp_path: Path) -> None:
    write_dataset(_spec(), 2, tmp_path / "data")
    with pytest.raises(DatasetError, match="expected"):
        read_dataset(tmp_path / "data", expected_spec=default_target_spec(_spec()))


def test_count_mismatch(tmp_path: Path) -> None:
    dataset = write_dataset(_spec(), 2, tmp_path / "data")
    save_dataset(dataset, tmp_path / "copy")
    manifest_path = tmp_path / "copy" / MANIFEST_NAME
    manifest = yaml.safe_load(manifest_path.read_text())
    manifest["count"] = 3
    manifest_path.write_text(yaml.safe_dump(manifest))
    with pytest.raises(DatasetError, match="lists 2 scenes"):
        read_dataset(tmp_path / "copy")
