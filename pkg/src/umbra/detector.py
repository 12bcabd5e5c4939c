"""Detection network: coarse context over all backbone taps, a fine-context
chain that shrinks the effective receptive field by interleaved upsampling,
distraction-aware feature modulation, and a fusion head with per-scale side
outputs for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, StageBackbone
from .errors import ConfigError, ShapeError

MODES = ("bb_only", "bb_ccd", "bb_fcd", "bb_ccd_fcd", "r2d_no_cfl", "r2d_full")
MODE_ALIASES = {"fcsd_only": "bb_ccd_fcd"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES} "
                          f"or aliases {tuple(MODE_ALIASES)}")
    return mode


@dataclass
class FCDConfig:
    depth: int = 4
    growth_px: int = 50
    channels: int = 32
    final_side: Optional[int] = None  # overrides the +growth schedule when set

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"fcd depth must be >= 1, got {self.depth}")
        if self.growth_px < 1:
            raise ConfigError(f"fcd growth_px must be >= 1, got {self.growth_px}")
        if self.channels < 1:
            raise ConfigError(f"fcd channels must be >= 1, got {self.channels}")


@dataclass
class ScaleOutputs:
    """Per-scale features and predictions, all predictions at input size."""

    features: list[torch.Tensor] = field(default_factory=list)
    ds_features: list[Optional[torch.Tensor]] = field(default_factory=list)
    side_preds: list[torch.Tensor] = field(default_factory=list)
    fp_preds: list[Optional[torch.Tensor]] = field(default_factory=list)
    fn_preds: list[Optional[torch.Tensor]] = field(default_factory=list)
    final_pred: Optional[torch.Tensor] = None


def _resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBlock(nn.Sequential):
    """Two 3×3 convs with BN+ReLU mapping a tap to a common width."""

    def __init__(self, in_c: int, out_c: int):
        super().__init__(
            nn.Conv2d(in_c, out_c, 3, padding=1),
            nn.BatchNorm2d(out_c),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_c, out_c, 3, padding=1),
            nn.BatchNorm2d(out_c),
            nn.ReLU(inplace=True),
        )


class CoarseDetector(nn.Module):
    """Per-tap conv blocks over all five backbone scales."""

    def __init__(self, tap_channels: Sequence[int], width: int = 64):
        super().__init__()
        self.width = width
        self.blocks = nn.ModuleList(ConvBlock(c, width) for c in tap_channels)

    def forward(self, taps: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [blk(t) for blk, t in zip(self.blocks, taps)]


class FineDetector(nn.Module):
    """Conv chain with interleaved upsampling that grows each side by a fixed
    pixel count, constraining the receptive field instead of enlarging it."""

    def __init__(self, in_c: int, cfg: FCDConfig | None = None):
        super().__init__()
        self.cfg = cfg or FCDConfig()
        self.cfg.validate()
        c = self.cfg.channels
        self.convs = nn.ModuleList(
            nn.Conv2d(in_c if i == 0 else c, c, 3, padding=1)
            for i in range(self.cfg.depth))

    def output_side(self, input_side: int) -> int:
        if self.cfg.final_side is not None:
            return self.cfg.final_side
        return input_side + self.cfg.depth * self.cfg.growth_px

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        depth, growth = self.cfg.depth, self.cfg.growth_px
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.cfg.final_side is not None and i == depth - 1:
                size = (self.cfg.final_side, self.cfg.final_side)
            else:
                size = (x.shape[-2] + growth, x.shape[-1] + growth)
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            x = F.relu(x)
        return x


def ds_modulate(feat: torch.Tensor, a_fp: torch.Tensor,
                a_fn: torch.Tensor) -> torch.Tensor:
    """Feature modulation: boost where misses are predicted, damp where
    false alarms are; identity when a_fp == a_fn."""
    return feat * (1.0 + a_fn - a_fp)


class DistractionModule(nn.Module):
    """Predicts false-positive / false-negative attention maps and modulates
    the feature map with them."""

    def __init__(self, channels: int):
        super().__init__()
        self.fp_head = nn.Conv2d(channels, 1, 3, padding=1)
        self.fn_head = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        a_fp = torch.sigmoid(self.fp_head(feat))
        a_fn = torch.sigmoid(self.fn_head(feat))
        return ds_modulate(feat, a_fp, a_fn), a_fp, a_fn


class FusionHead(nn.Module):
    """1×1 conv over the concatenation of all fused maps, sigmoid output.

    Computed as per-map 1×1 convs summed after resizing, which equals the
    conv-over-concatenation (1×1 convs and bilinear resizing commute) while
    keeping every map at its native resolution until the last step.
    """

    def __init__(self, map_channels: Sequence[int]):
        super().__init__()
        self.projections = nn.ModuleList(
            nn.Conv2d(c, 1, 1, bias=False) for c in map_channels)
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, maps: Sequence[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        logit = self.bias.view(1, 1, 1, 1)
        for proj, m in zip(self.projections, maps):
            logit = logit + _resize(proj(m), size)
        return torch.sigmoid(logit)


class SideHead(nn.Module):
    """Per-scale prediction: 1×1 conv over [feature; modulated feature]."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        return _resize(torch.sigmoid(self.proj(x)), size)


class ShadowDetector(nn.Module):
    """Backbone → (optional feature injections) → coarse/fine context blocks
    → distraction modules → fusion, per the configured ablation mode.

    Scales, in order: the five coarse scales (CCD features when the mode has
    a CCD, raw backbone taps otherwise) followed by the fine-context scale
    when the mode has an FCD. Every scale gets a side prediction; scales
    with a distraction module additionally get FP/FN predictions.
    """

    def __init__(self, mode: str = "bb_ccd_fcd",
                 backbone_cfg: BackboneConfig | None = None,
                 fcd_cfg: FCDConfig | None = None,
                 ccd_width: int = 64,
                 backbone: Optional[nn.Module] = None):
        super().__init__()
        self.mode = canonical_mode(mode)
        # any extractor honoring the tap contract (cfg.channels + stride
        # schedule 2/4/8/16/32) can stand in for the default one
        self.backbone = backbone if backbone is not None else StageBackbone(backbone_cfg)
        chans = self.backbone.cfg.channels
        self.ccd_width = ccd_width

        self.uses_ccd = self.mode in ("bb_ccd", "bb_ccd_fcd", "r2d_no_cfl", "r2d_full")
        self.uses_fcd = self.mode in ("bb_fcd", "bb_ccd_fcd", "r2d_no_cfl", "r2d_full")

        if self.uses_ccd:
            self.ccd = CoarseDetector(chans, ccd_width)
            self.ccd_ds = nn.ModuleList(DistractionModule(ccd_width) for _ in range(5))
            scale_channels = [ccd_width] * 5
            self.scale_has_ds = [True] * 5
        else:
            scale_channels = list(chans)
            self.scale_has_ds = [False] * 5
        if self.uses_fcd:
            self.fcd = FineDetector(chans[0], fcd_cfg)
            self.fcd_ds = DistractionModule(self.fcd.cfg.channels)
            scale_channels.append(self.fcd.cfg.channels)
            self.scale_has_ds.append(True)

        self.side_heads = nn.ModuleList(
            SideHead(2 * c if has_ds else c)
            for c, has_ds in zip(scale_channels, self.scale_has_ds))
        fusion_channels = scale_channels + [
            c for c, has_ds in zip(scale_channels, self.scale_has_ds) if has_ds]
        self.fusion = FusionHead(fusion_channels)

    @property
    def injection_channels(self) -> tuple[int, int]:
        """Channel counts expected for the (L2, L5) injections."""
        chans = self.backbone.cfg.channels
        return chans[1], chans[4]

    def forward(self, image: torch.Tensor,
                injections: Optional[tuple[torch.Tensor, torch.Tensor]] = None
                ) -> ScaleOutputs:
        size = (image.shape[-2], image.shape[-1])
        taps = self.backbone(image)
        tensors = [t.tensor for t in taps]
        if injections is not None:
            c1, c2 = injections
            for name, inj, idx in (("C1", c1, 1), ("C2", c2, 4)):
                if inj.shape != tensors[idx].shape:
                    raise ShapeError(f"{name} injection shape {tuple(inj.shape)} does not "
                                     f"match tap {tuple(tensors[idx].shape)}")
            tensors[1] = tensors[1] + c1
            tensors[4] = tensors[4] + c2

        out = ScaleOutputs()
        coarse = self.ccd(tensors) if self.uses_ccd else tensors
        for k, feat in enumerate(coarse):
            out.features.append(feat)
            if self.scale_has_ds[k]:
                ds_feat, a_fp, a_fn = self.ccd_ds[k](feat)
                out.ds_features.append(ds_feat)
                out.fp_preds.append(_resize(a_fp, size))
                out.fn_preds.append(_resize(a_fn, size))
            else:
                out.ds_features.append(None)
                out.fp_preds.append(None)
                out.fn_preds.append(None)
        if self.uses_fcd:
            f6 = self.fcd(tensors[0])
            ds6, a_fp6, a_fn6 = self.fcd_ds(f6)
            out.features.append(f6)
            out.ds_features.append(ds6)
            out.fp_preds.append(_resize(a_fp6, size))
            out.fn_preds.append(_resize(a_fn6, size))

        for k, head in enumerate(self.side_heads):
            if self.scale_has_ds[k]:
                x = torch.cat([out.features[k], out.ds_features[k]], dim=1)
            else:
                x = out.features[k]
            out.side_preds.append(head(x, size))

        fusion_maps = list(out.features) + [m for m in out.ds_features if m is not None]
        out.final_pred = self.fusion(fusion_maps, size)
        return out
