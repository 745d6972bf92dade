"""Configuration records for adaptation runs, baselines and synthetic domains."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

from .errors import ConfigError

METHODS: Tuple[str, ...] = ("ld", "entmin", "pseudo", "pseudo_ent", "pseudo_sel", "shot_im")
BASELINE_KINDS: Tuple[str, ...] = METHODS[1:]
HCLS_MODES: Tuple[str, ...] = ("symmetric", "lower", "uniform")
LOSS_REDUCTIONS: Tuple[str, ...] = ("mean", "sum")
ABLATIONS: Tuple[str, ...] = ("none", "no-pos", "no-neg")


@dataclass(slots=True)
class AdaptationConfig:
    """All hyper-parameters of source pre-training and source-free adaptation."""

    alpha: float = 0.2
    epsilon: int = 3
    lambda_ent: float = 1.0
    lambda_neg: float = 1.0
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    batch_size: int = 8
    eval_batch_size: int = 32
    source_lr0: float = 1e-2
    source_epochs: int = 40
    adapt_epochs: int = 20
    seed: int = 0
    num_classes: int = 8
    method: str = "ld"
    hcls_mode: str = "symmetric"
    # Smallest softmax rank the band may start at when epsilon has to shrink for small C.
    hcls_min_rank: int = 3
    disable_pos: bool = False
    disable_neg: bool = False
    loss_reduction: str = "mean"
    hflip: bool = True
    full_augmentation: bool = False
    confidence_threshold: float = 0.9
    tradeoff: float = 1.0
    diversity_weight: float = 1.0
    workers: int = 1

    def validate(self) -> "AdaptationConfig":
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        for name in ("lambda_ent", "lambda_neg", "lr0", "source_lr0", "weight_decay", "tradeoff", "diversity_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be positive, got {self.poly_power}")
        for name in ("batch_size", "eval_batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.source_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.num_classes < 3:
            raise ConfigError(f"num_classes must be at least 3, got {self.num_classes}")
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method '{self.method}', expected one of {', '.join(METHODS)}")
        if self.hcls_mode not in HCLS_MODES:
            raise ConfigError(f"Unknown hcls_mode '{self.hcls_mode}', expected one of {', '.join(HCLS_MODES)}")
        if self.hcls_min_rank < 2:
            raise ConfigError(f"hcls_min_rank must be at least 2, got {self.hcls_min_rank}")
        if self.loss_reduction not in LOSS_REDUCTIONS:
            raise ConfigError(f"loss_reduction must be 'mean' or 'sum', got '{self.loss_reduction}'")
        if self.disable_pos and self.disable_neg:
            raise ConfigError("disable_pos and disable_neg cannot both be set: no training signal would remain")
        if self.method != "ld" and (self.disable_pos or self.disable_neg):
            raise ConfigError(f"ablations only apply to method 'ld', not '{self.method}'")
        self.baseline_spec()
        return self

    def baseline_spec(self) -> "BaselineSpec":
        """The baseline objective selected by ``method`` (``ld`` maps to no baseline)."""
        kind = self.method if self.method in BASELINE_KINDS else "entmin"
        return BaselineSpec(
            kind=kind,
            confidence_threshold=self.confidence_threshold,
            tradeoff=self.tradeoff,
            diversity_weight=self.diversity_weight,
        ).validate()

    def with_ablation(self, ablation: str) -> "AdaptationConfig":
        if ablation not in ABLATIONS:
            raise ConfigError(f"Unknown ablation '{ablation}', expected one of {', '.join(ABLATIONS)}")
        self.disable_pos = ablation == "no-pos"
        self.disable_neg = ablation == "no-neg"
        return self


@dataclass(slots=True)
class BaselineSpec:
    """Selects and parameterises one of the comparison objectives."""

    kind: str
    confidence_threshold: float = 0.9
    tradeoff: float = 1.0
    diversity_weight: float = 1.0

    def validate(self) -> "BaselineSpec":
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"Unknown baseline '{self.kind}', expected one of {', '.join(BASELINE_KINDS)}")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ConfigError(f"confidence_threshold must lie in (0, 1), got {self.confidence_threshold}")
        return self


@dataclass(slots=True)
class DomainSpec:
    """Procedural description of one synthetic domain."""

    class_frequencies: List[float]
    base_colors: List[List[float]]
    texture_amplitudes: List[float]
    texture_periods: List[float]
    hue_rotation: float = 0.0
    noise_sigma: float = 0.0
    brightness_gain: float = 1.0
    height: int = 64
    width: int = 64
    seed: int = 0
    domain: str = "source"

    @property
    def num_classes(self) -> int:
        return len(self.class_frequencies)

    def validate(self) -> "DomainSpec":
        count = self.num_classes
        if count < 1:
            raise ConfigError("class_frequencies must not be empty")
        for name in ("base_colors", "texture_amplitudes", "texture_periods"):
            if len(getattr(self, name)) != count:
                raise ConfigError(
                    f"{name} describes {len(getattr(self, name))} classes but class_frequencies has {count}"
                )
        if any(frequency < 0 for frequency in self.class_frequencies):
            raise ConfigError("class_frequencies must be non-negative")
        if abs(sum(self.class_frequencies) - 1.0) > 1e-6:
            raise ConfigError(f"class_frequencies must sum to 1, got {sum(self.class_frequencies):.8f}")
        if any(len(color) != 3 for color in self.base_colors):
            raise ConfigError("every base color needs three channels")
        if any(period <= 0 for period in self.texture_periods):
            raise ConfigError("texture periods must be positive")
        if self.height < 4 or self.width < 4:
            raise ConfigError("scenes must be at least 4x4 pixels")
        if self.noise_sigma < 0 or self.brightness_gain <= 0:
            raise ConfigError("noise_sigma must be non-negative and brightness_gain positive")
        return self

    def shares_label_space(self, other: "DomainSpec") -> bool:
        mine = {index for index, value in enumerate(self.class_frequencies) if value > 0}
        theirs = {index for index, value in enumerate(other.class_frequencies) if value > 0}
        return self.num_classes == other.num_classes and mine == theirs

    def with_shift(
        self,
        *,
        hue_rotation: float,
        noise_sigma: float,
        brightness_gain: float,
        domain: str = "target",
    ) -> "DomainSpec":
        return DomainSpec(
            class_frequencies=list(self.class_frequencies),
            base_colors=[list(color) for color in self.base_colors],
            texture_amplitudes=list(self.texture_amplitudes),
            texture_periods=list(self.texture_periods),
            hue_rotation=hue_rotation,
            noise_sigma=noise_sigma,
            brightness_gain=brightness_gain,
            height=self.height,
            width=self.width,
            seed=self.seed,
            domain=domain,
        )

    def reseeded(self, seed: int) -> "DomainSpec":
        spec = self.with_shift(
            hue_rotation=self.hue_rotation,
            noise_sigma=self.noise_sigma,
            brightness_gain=self.brightness_gain,
            domain=self.domain,
        )
        spec.seed = seed
        return spec
