"""Toy encoder-decoder segmentation network and the architecture registry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass(slots=True)
class ArchitectureSpec:
    """Describes how to build a segmentation network.

    ``skip_width`` channels of full-resolution features join the upsampled encoder output
    before the head; 0 turns the skip branch off. ``aspp_rates`` is reserved for a
    DeepLab-style head; the toy network ignores it.
    """

    name: str = "toy"
    num_classes: int = 8
    widths: List[int] = field(default_factory=lambda: [16, 32, 64, 64])
    downsample_stages: int = 2
    skip_width: int = 16
    aspp_rates: List[int] | None = None

    def validate(self) -> ArchitectureSpec:
        if self.num_classes < 3:
            raise ConfigError(f"num_classes must be at least 3, got {self.num_classes}")
        if not self.widths:
            raise ConfigError("at least one convolution stage is required")
        if not 0 <= self.downsample_stages <= len(self.widths):
            raise ConfigError(
                f"downsample_stages must lie in [0, {len(self.widths)}], got {self.downsample_stages}"
            )
        if self.skip_width < 0:
            raise ConfigError(f"skip_width must be non-negative, got {self.skip_width}")
        return self


def _groups(width: int) -> int:
    for groups in (4, 2, 1):
        if width % groups == 0:
            return groups
    return 1


class ToySegmentationNet(nn.Module):
    """Conv-GroupNorm-ReLU stages, the first ``downsample_stages`` with stride 2, bilinear upsampling
    back to input resolution, an optional full-resolution skip branch and a 1x1 classification head.

    Takes channels-last images ``(B, H, W, 3)`` and returns logits ``(B, H, W, C)``.
    """

    def __init__(self, spec: ArchitectureSpec) -> None:
        super().__init__()
        self.spec = spec
        stages = []
        in_channels = 3
        for index, width in enumerate(spec.widths):
            stride = 2 if index < spec.downsample_stages else 1
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, width, kernel_size=3, stride=stride, padding=1, bias=False),
                    nn.GroupNorm(_groups(width), width),
                    nn.ReLU(inplace=True),
                )
            )
            in_channels = width
        self.encoder = nn.Sequential(*stages)
        self.skip: nn.Module | None = None
        if spec.skip_width > 0 and spec.downsample_stages > 0:
            self.skip = nn.Sequential(
                nn.Conv2d(3, spec.skip_width, kernel_size=3, padding=1, bias=False),
                nn.GroupNorm(_groups(spec.skip_width), spec.skip_width),
                nn.ReLU(inplace=True),
            )
            in_channels += spec.skip_width
        self.head = nn.Conv2d(in_channels, spec.num_classes, kernel_size=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[-1] != 3:
            raise InputError(f"images must have shape (B, H, W, 3), got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        height, width = x.shape[-2:]
        features = self.encoder(x)
        if self.skip is not None:
            features = F.interpolate(features, size=(height, width), mode="bilinear", align_corners=False)
            features = torch.cat([features, self.skip(x)], dim=1)
        logits = self.head(features)
        if logits.shape[-2:] != (height, width):
            logits = F.interpolate(logits, size=(height, width), mode="bilinear", align_corners=False)
        return logits.permute(0, 2, 3, 1)


ModelBuilder = Callable[[ArchitectureSpec], nn.Module]

_ARCHITECTURES: Dict[str, ModelBuilder] = {
    "toy": ToySegmentationNet,
}


def register_architecture(name: str, builder: ModelBuilder) -> None:
    """Make a full-scale backbone available under ``name`` without touching callers."""
    _ARCHITECTURES[name] = builder


def available_architectures() -> List[str]:
    return sorted(_ARCHITECTURES)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.GroupNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(spec: ArchitectureSpec, seed: int = 0) -> nn.Module:
    """Build and He-initialise a model; the global torch RNG is left untouched."""
    spec.validate()
    builder = _ARCHITECTURES.get(spec.name)
    if builder is None:
        raise ConfigError(
            f"Unknown architecture '{spec.name}', registered: {', '.join(available_architectures())}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = builder(spec)
        model.apply(_init_weights)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(parameter.numel() for parameter in model.parameters())


@torch.no_grad()
def predict_probs(model: nn.Module, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Softmax predictions for a stack of images, evaluated in eval mode batch by batch."""
    if images.shape[0] == 0:
        raise InputError("cannot predict on an empty image stack")
    was_training = model.training
    model.eval()
    try:
        chunks = [
            torch.softmax(model(images[start : start + batch_size]), dim=-1)
            for start in range(0, images.shape[0], batch_size)
        ]
    finally:
        model.train(was_training)
    return torch.cat(chunks, dim=0)
