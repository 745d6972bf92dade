"""Scene containers plus reading and writing synthetic dataset directories."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Sequence

import numpy as np
import yaml

from .config_io import domain_spec_from_mapping, domain_spec_hash
from .errors import DatasetError
from .models import DomainSpec
from .utils import ensure_directory

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.yaml"
_MAGIC = b"LDSC"
_RECORD_HEADER = struct.Struct("<4sBBHH")
_HAS_LABELS = 0x01
_MANIFEST_HEADER = "# labeldenoise synthetic dataset\n"


@dataclass(slots=True)
class LabeledScene:
    image: np.ndarray
    labels: np.ndarray | None
    domain: str
    seed: int
    index: int


class TargetImages:
    """Images-only view of a split handed to source-free adaptation; labels are unreachable."""

    __slots__ = ("_images",)

    def __init__(self, images: np.ndarray) -> None:
        self._images = images

    def __len__(self) -> int:
        return int(self._images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int]:
        return int(self._images.shape[1]), int(self._images.shape[2])

    def batch(self, indices: Sequence[int] | np.ndarray) -> np.ndarray:
        return self._images[np.asarray(indices, dtype=np.int64)]

    def all(self) -> np.ndarray:
        return self._images


@dataclass(slots=True)
class SceneDataset:
    spec: DomainSpec
    images: np.ndarray
    labels: np.ndarray | None = None
    start_index: int = 0

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, position: int) -> LabeledScene:
        return LabeledScene(
            image=self.images[position],
            labels=None if self.labels is None else self.labels[position],
            domain=self.spec.domain,
            seed=self.spec.seed,
            index=self.start_index + position,
        )

    def __iter__(self) -> Iterator[LabeledScene]:
        for position in range(len(self)):
            yield self[position]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def images_only(self) -> TargetImages:
        return TargetImages(self.images)

    def without_labels(self) -> SceneDataset:
        return SceneDataset(spec=self.spec, images=self.images, labels=None, start_index=self.start_index)

    def require_labels(self, purpose: str) -> np.ndarray:
        if self.labels is None:
            raise DatasetError(f"{purpose} needs ground-truth labels, but this {self.spec.domain} split has none")
        return self.labels

    def class_pixel_mass(self) -> np.ndarray:
        labels = self.require_labels("class pixel mass")
        counts = np.bincount(labels.ravel(), minlength=self.num_classes).astype(np.float64)
        return counts / counts.sum()

    @classmethod
    def from_scenes(cls, spec: DomainSpec, scenes: Sequence[LabeledScene]) -> SceneDataset:
        if not scenes:
            raise DatasetError("a dataset needs at least one scene")
        labelled = all(scene.labels is not None for scene in scenes)
        return cls(
            spec=spec,
            images=np.stack([scene.image for scene in scenes]).astype(np.float32),
            labels=np.stack([scene.labels for scene in scenes]).astype(np.uint8) if labelled else None,
            start_index=scenes[0].index,
        )


def _record_name(index: int) -> str:
    return f"scene_{index:05d}.bin"


def _write_record(path: Path, image: np.ndarray, labels: np.ndarray | None) -> None:
    height, width = image.shape[:2]
    flags = _HAS_LABELS if labels is not None else 0
    header = _RECORD_HEADER.pack(_MAGIC, FORMAT_VERSION, flags, height, width)
    label_bytes = labels.astype(np.uint8).tobytes() if labels is not None else b""
    path.write_bytes(header + image.astype("<f4").tobytes() + label_bytes)


def _read_record(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    if not path.exists():
        raise DatasetError(f"Scene record '{path}' is missing")
    raw = path.read_bytes()
    if len(raw) < _RECORD_HEADER.size:
        raise DatasetError(f"Scene record '{path}' is truncated")
    magic, version, flags, height, width = _RECORD_HEADER.unpack_from(raw)
    if magic != _MAGIC or version != FORMAT_VERSION:
        raise DatasetError(f"Scene record '{path}' has an unknown format")
    has_labels = bool(flags & _HAS_LABELS)
    image_bytes = height * width * 3 * 4
    expected = _RECORD_HEADER.size + image_bytes + (height * width if has_labels else 0)
    if len(raw) != expected:
        raise DatasetError(f"Scene record '{path}' has {len(raw)} bytes, expected {expected} (truncated?)")
    offset = _RECORD_HEADER.size
    image = np.frombuffer(raw, dtype="<f4", count=height * width * 3, offset=offset).reshape(height, width, 3)
    if not has_labels:
        return image.astype(np.float32), None
    labels = np.frombuffer(raw, dtype=np.uint8, count=height * width, offset=offset + image_bytes)
    return image.astype(np.float32), labels.reshape(height, width).copy()


def save_dataset(dataset: SceneDataset, path: Path) -> Path:
    """Write one record per scene plus a manifest describing the spec and count."""
    ensure_directory(path)
    names: List[str] = []
    for scene in dataset:
        name = _record_name(scene.index)
        _write_record(path / name, scene.image, scene.labels)
        names.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(dataset),
        "start_index": dataset.start_index,
        "has_labels": dataset.has_labels,
        "spec_hash": domain_spec_hash(dataset.spec),
        "spec": asdict(dataset.spec),
        "scenes": names,
    }
    (path / MANIFEST_NAME).write_text(f"{_MANIFEST_HEADER}{yaml.safe_dump(manifest, sort_keys=False)}")
    return path


def read_dataset(path: Path, expected_spec: DomainSpec | None = None) -> SceneDataset:
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"'{path}' is not a dataset directory (no {MANIFEST_NAME})")
    try:
        manifest = yaml.safe_load(manifest_path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DatasetError(f"Manifest '{manifest_path}' is not valid YAML: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"Manifest '{manifest_path}' has an unsupported format")

    if not isinstance(manifest.get("spec"), dict):
        raise DatasetError(f"Manifest '{manifest_path}' does not record its spec")
    spec = domain_spec_from_mapping(manifest["spec"])
    recorded_hash = manifest.get("spec_hash")
    if domain_spec_hash(spec) != recorded_hash:
        raise DatasetError(f"Manifest '{manifest_path}' spec does not match its recorded hash {recorded_hash}")
    if expected_spec is not None and domain_spec_hash(expected_spec) != recorded_hash:
        raise DatasetError(
            f"Dataset '{path}' was generated from spec {recorded_hash}, expected {domain_spec_hash(expected_spec)}"
        )

    names = manifest.get("scenes") or []
    if len(names) != manifest.get("count") or not names:
        raise DatasetError(f"Manifest '{manifest_path}' lists {len(names)} scenes but reports {manifest.get('count')}")
    has_labels = bool(manifest.get("has_labels", True))
    images = np.empty((len(names), spec.height, spec.width, 3), dtype=np.float32)
    labels = np.empty((len(names), spec.height, spec.width), dtype=np.uint8) if has_labels else None
    for position, name in enumerate(names):
        image, label_map = _read_record(path / name)
        if image.shape[:2] != (spec.height, spec.width):
            raise DatasetError(f"Scene record '{name}' has size {image.shape[:2]}, manifest says {(spec.height, spec.width)}")
        if (label_map is not None) != has_labels:
            raise DatasetError(f"Scene record '{name}' disagrees with the manifest about carrying labels")
        images[position] = image
        if labels is not None:
            labels[position] = label_map
    return SceneDataset(spec=spec, images=images, labels=labels, start_index=int(manifest.get("start_index", 0)))
