"""Procedural source/target segmentation scenes with class imbalance and appearance shift.

A scene is a background class plus ellipses and rectangles painted for the other classes.
Geometry is drawn from a generator keyed only by ``(seed, index)``; appearance (colour,
stripe texture) and the domain shift (hue rotation about the grey axis, brightness gain,
additive noise) use separate streams, so two specs that differ only in shift produce the
same label maps.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .dataset_io import LabeledScene, SceneDataset, save_dataset
from .errors import ConfigError, DatasetError
from .models import DomainSpec

logger = logging.getLogger(__name__)

DEFAULT_FREQUENCIES = [0.45, 0.20, 0.12, 0.09, 0.07, 0.04, 0.017, 0.013]
DEFAULT_SHIFT = {"hue_rotation": 40.0, "noise_sigma": 0.05, "brightness_gain": 1.2}
_MAX_SHAPES_PER_CLASS = 40
_MIN_SHAPE_AREA = 12.0


def long_tailed_frequencies(num_classes: int, skew: float = 1.6) -> List[float]:
    if num_classes == len(DEFAULT_FREQUENCIES) and skew == 1.6:
        return list(DEFAULT_FREQUENCIES)
    weights = np.array([1.0 / (rank + 1) ** skew for rank in range(num_classes)])
    return [float(value) for value in weights / weights.sum()]


def default_domain_spec(num_classes: int = 8, *, seed: int = 0, height: int = 64, width: int = 64) -> DomainSpec:
    """Long-tailed source-domain spec with evenly spaced hues and per-class stripe textures."""
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    hues = np.arange(num_classes) / num_classes
    saturation = np.where(np.arange(num_classes) % 2 == 0, 0.65, 0.45)
    value = np.where(np.arange(num_classes) % 3 == 0, 0.85, 0.65)
    colors = hsv_to_rgb(np.stack([hues, saturation, value], axis=-1))
    return DomainSpec(
        class_frequencies=long_tailed_frequencies(num_classes),
        base_colors=[[round(float(channel), 4) for channel in color] for color in colors],
        texture_amplitudes=[round(0.05 + 0.02 * (index % 4), 4) for index in range(num_classes)],
        texture_periods=[float(2 + (3 * index) % 7) for index in range(num_classes)],
        height=height,
        width=width,
        seed=seed,
        domain="source",
    ).validate()


def default_target_spec(source: DomainSpec, *, seed: int | None = None) -> DomainSpec:
    spec = source.with_shift(domain="target", **DEFAULT_SHIFT)
    if seed is not None:
        spec.seed = seed
    return spec.validate()


@dataclass(slots=True)
class BenchmarkSplit:
    spec: DomainSpec
    count: int
    start_index: int = 0


def benchmark_splits(
    seed: int = 0,
    num_classes: int = 8,
    *,
    source_count: int = 400,
    target_count: int = 400,
    eval_count: int = 100,
    source_eval_count: int = 100,
) -> Dict[str, BenchmarkSplit]:
    """The four splits of the default benchmark, each generated from its own seed."""
    source = default_domain_spec(num_classes, seed=4 * seed)
    return {
        "source": BenchmarkSplit(source, source_count),
        "source_eval": BenchmarkSplit(source.reseeded(4 * seed + 3), source_eval_count),
        "target_train": BenchmarkSplit(default_target_spec(source, seed=4 * seed + 1), target_count),
        "target_eval": BenchmarkSplit(default_target_spec(source, seed=4 * seed + 2), eval_count),
    }


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    angle = math.radians(degrees)
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    third = (1.0 - cos_a) / 3.0
    root = math.sqrt(1.0 / 3.0) * sin_a
    return np.array(
        [
            [cos_a + third, third - root, third + root],
            [third + root, cos_a + third, third - root],
            [third - root, third + root, cos_a + third],
        ]
    )


def _shape_mask(rng: np.random.Generator, area: float, height: int, width: int) -> np.ndarray:
    rows, cols = np.ogrid[:height, :width]
    center_y = rng.uniform(0, height)
    center_x = rng.uniform(0, width)
    aspect = rng.uniform(0.5, 2.0)
    if rng.random() < 0.5:
        radius_y = math.sqrt(area * aspect / math.pi)
        radius_x = area / (math.pi * radius_y)
        return ((rows - center_y) / radius_y) ** 2 + ((cols - center_x) / radius_x) ** 2 <= 1.0
    half_y = math.sqrt(area * aspect) / 2.0
    half_x = area / (4.0 * half_y)
    return (np.abs(rows - center_y) <= half_y) & (np.abs(cols - center_x) <= half_x)


def _paint_labels(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    frequencies = np.asarray(spec.class_frequencies)
    background = int(np.argmax(frequencies))
    labels = np.full((spec.height, spec.width), background, dtype=np.uint8)
    pixels = spec.height * spec.width
    # Rarest classes first so they are never crowded out of free background.
    order = [int(cls) for cls in np.argsort(frequencies, kind="stable") if cls != background]
    for cls in order:
        if frequencies[cls] <= 0:
            continue
        target = frequencies[cls] * pixels * rng.uniform(0.6, 1.4)
        painted = 0
        for _ in range(_MAX_SHAPES_PER_CLASS):
            remaining = target - painted
            if remaining <= 0:
                break
            area = max(remaining * rng.uniform(0.4, 1.0), _MIN_SHAPE_AREA)
            fresh = _shape_mask(rng, area, spec.height, spec.width) & (labels == background)
            labels[fresh] = cls
            painted += int(fresh.sum())
    return labels


def _render(spec: DomainSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[: spec.height, : spec.width].astype(np.float64)
    image = np.zeros((spec.height, spec.width, 3), dtype=np.float64)
    jitter = rng.normal(0.0, 0.03, size=3)
    for cls in range(spec.num_classes):
        orientation = math.pi * cls / spec.num_classes
        phase = rng.uniform(0.0, 2.0 * math.pi)
        mask = labels == cls
        if not mask.any():
            continue
        coordinate = cols * math.cos(orientation) + rows * math.sin(orientation)
        stripes = spec.texture_amplitudes[cls] * np.sin(2.0 * math.pi * coordinate / spec.texture_periods[cls] + phase)
        image[mask] = np.asarray(spec.base_colors[cls]) + jitter + stripes[mask, None]
    return image


def _apply_shift(spec: DomainSpec, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    shifted = image @ _hue_rotation_matrix(spec.hue_rotation).T
    shifted = shifted * spec.brightness_gain
    shifted = shifted + rng.normal(0.0, 1.0, size=shifted.shape) * spec.noise_sigma
    return np.clip(shifted, 0.0, 1.0)


def generate_scene(spec: DomainSpec, index: int) -> LabeledScene:
    spec.validate()
    geometry = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 0]))
    appearance = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 1]))
    noise = np.random.default_rng(np.random.SeedSequence([spec.seed, index, 2]))
    labels = _paint_labels(spec, geometry)
    image = _apply_shift(spec, _render(spec, labels, appearance), noise)
    return LabeledScene(
        image=image.astype(np.float32),
        labels=labels,
        domain=spec.domain,
        seed=spec.seed,
        index=index,
    )


def generate_dataset(spec: DomainSpec, count: int, *, start_index: int = 0, workers: int = 1) -> SceneDataset:
    if count < 1:
        raise DatasetError(f"refusing to generate an empty dataset (count={count})")
    spec.validate()
    indices = range(start_index, start_index + count)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scenes = list(pool.map(lambda index: generate_scene(spec, index), indices))
    logger.debug("generated %d %s scenes (seed %d)", count, spec.domain, spec.seed)
    return SceneDataset.from_scenes(spec, scenes)


def write_dataset(
    spec: DomainSpec,
    n_scenes: int,
    path: Path,
    *,
    start_index: int = 0,
    workers: int = 1,
    with_labels: bool = True,
) -> SceneDataset:
    """Generate and store a split; ``with_labels=False`` stores the images alone."""
    dataset = generate_dataset(spec, n_scenes, start_index=start_index, workers=workers)
    if not with_labels:
        dataset = dataset.without_labels()
    save_dataset(dataset, path)
    logger.info("wrote %d scenes to %s", n_scenes, path)
    return dataset
