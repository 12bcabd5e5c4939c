"""Multi-scale feature extractor exposing five taps L1..L5 at strides
2/4/8/16/32. Trainable from scratch; any extractor honoring the same tap
contract (channel tuple + stride schedule) can be plugged in behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

TAP_NAMES = ("L1", "L2", "L3", "L4", "L5")
TAP_STRIDES = (2, 4, 8, 16, 32)


@dataclass
class FeatureTap:
    name: str
    tensor: torch.Tensor
    stride: int


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    norm: bool = True
    trainable: bool = True

    def validate(self) -> None:
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ConfigError(f"backbone needs 5 positive channel counts, got {self.channels}")


def _stage(in_c: int, out_c: int, norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_c, out_c, 3, stride=2, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_c))
    layers += [nn.ReLU(inplace=True), nn.Conv2d(out_c, out_c, 3, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_c))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class StageBackbone(nn.Module):
    """Five stride-2 stages of [3×3 conv, norm, ReLU] ×2."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.cfg.validate()
        chans = self.cfg.channels
        self.stages = nn.ModuleList(
            _stage(3 if i == 0 else chans[i - 1], chans[i], self.cfg.norm)
            for i in range(5))
        if not self.cfg.trainable:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[FeatureTap]:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected B×3×S×S input, got {tuple(image.shape)}")
        side = image.shape[-1]
        if image.shape[-2] != side or side % 32 != 0:
            raise ShapeError(f"input side must be square and divisible by 32, got "
                             f"{image.shape[-2]}×{side}")
        taps = []
        x = image
        for name, stride, stage in zip(TAP_NAMES, TAP_STRIDES, self.stages):
            x = stage(x)
            taps.append(FeatureTap(name=name, tensor=x, stride=stride))
        return taps
