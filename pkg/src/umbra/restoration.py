"""Restoration network (5-level U-Net) plus the bridge that projects two of
its encoder feature maps into the detector's L2/L5 taps as additive
injections, and the naive residual-thresholding shadow predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

RESIDUAL_THRESHOLD = 0.05
BLOCK_ORDERS = ("conv_bn_relu_pool", "conv_pool_bn_relu")


@dataclass
class UNetConfig:
    enc_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    width_factor: float = 1.0
    block_order: str = "conv_bn_relu_pool"

    def validate(self) -> None:
        if len(self.enc_channels) != 5 or min(self.enc_channels) < 1:
            raise ConfigError(f"encoder needs 5 positive channel counts, got {self.enc_channels}")
        if self.width_factor <= 0:
            raise ConfigError(f"width_factor must be positive, got {self.width_factor}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}")

    def effective_channels(self) -> tuple[int, ...]:
        return tuple(max(4, int(round(c * self.width_factor))) for c in self.enc_channels)


@dataclass
class CFLConfig:
    source_layers: tuple[int, int] = (2, 5)   # encoder levels feeding the bridge
    gain: float = 0.1                         # init scale of the last projection conv
    encoder_grad_scale: float = 0.05          # damping of detector grads into the encoder

    def validate(self) -> None:
        if self.source_layers != (2, 5):
            raise ConfigError("bridge sources are fixed to encoder levels 2 and 5")
        if not (0.0 < self.encoder_grad_scale <= 1.0):
            raise ConfigError("encoder_grad_scale must be in (0, 1]")


class _EncBlock(nn.Module):
    """One encoder level: conv, norm, ReLU around a 2× max-pool. Exposes the
    pre-pool activation as the skip tensor."""

    def __init__(self, in_c: int, out_c: int, order: str):
        super().__init__()
        self.order = order
        self.conv = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_c)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.order == "conv_bn_relu_pool":
            skip = F.relu(self.bn(self.conv(x)))
            return self.pool(skip), skip
        skip = self.conv(x)
        return F.relu(self.bn(self.pool(skip))), skip


class _DecBlock(nn.Module):
    """One decoder level: 2× upsample, concat skip, conv, norm, ReLU."""

    def __init__(self, in_c: int, skip_c: int, out_c: int):
        super().__init__()
        self.conv = nn.Conv2d(in_c + skip_c, out_c, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_c)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        return F.relu(self.bn(self.conv(x)))


class RestorationUNet(nn.Module):
    """Encoder-decoder with level-to-level skips; sigmoid image head.

    forward returns (restored, r1, r2) where r1/r2 are the encoder level-2
    and level-5 outputs (strides 4 and 32).
    """

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        self.cfg.validate()
        chans = self.cfg.effective_channels()
        self.channels = chans
        ins = (3,) + chans[:-1]
        self.encoders = nn.ModuleList(
            _EncBlock(i, o, self.cfg.block_order) for i, o in zip(ins, chans))
        # decoder mirrors the encoder; level i consumes the skip of level i
        dec_out = chans[:-1][::-1] + (chans[0],)   # e.g. 256,128,64,32,32
        dec_in = (chans[-1],) + dec_out[:-1]
        self.decoders = nn.ModuleList(
            _DecBlock(i, s, o) for i, s, o in zip(dec_in, chans[::-1], dec_out))
        self.head = nn.Conv2d(dec_out[-1], 3, 1)

    @property
    def bridge_channels(self) -> tuple[int, int]:
        return self.channels[1], self.channels[4]

    def _encode(self, image: torch.Tensor):
        side = image.shape[-1]
        if image.shape[-2] != side or side % 32 != 0:
            raise ShapeError(f"input side must be square and divisible by 32, got "
                             f"{image.shape[-2]}×{side}")
        skips = []
        level_outs = []
        x = image
        for enc in self.encoders:
            x, skip = enc(x)
            skips.append(skip)
            level_outs.append(x)
        return x, skips, level_outs

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encoder pass only; returns the two bridge-fed feature maps."""
        _, _, level_outs = self._encode(image)
        return level_outs[1], level_outs[4]

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x, skips, level_outs = self._encode(image)
        r1, r2 = level_outs[1], level_outs[4]
        for dec, skip in zip(self.decoders, skips[::-1]):
            x = dec(x, skip)
        restored = torch.sigmoid(self.head(x))
        return restored, r1, r2


def _damp_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity on values; backward gradient multiplied by ``scale``."""
    if scale >= 1.0 or not x.requires_grad:
        return x
    return x * scale + (x * (1.0 - scale)).detach()


class FeatureBridge(nn.Module):
    """Projects the restoration encoder maps (r1, r2) onto the detector's
    (L2, L5) tap shapes: 1×1 conv to the target width, then a 3×3 conv,
    then bilinear resize.

    Gradients flow back into the restoration encoder, damped by
    encoder_grad_scale so a hot from-scratch detector schedule cannot wreck
    the pretrained features it is learning to read.
    """

    def __init__(self, source_channels: tuple[int, int],
                 target_channels: tuple[int, int],
                 cfg: CFLConfig | None = None):
        super().__init__()
        self.cfg = cfg or CFLConfig()
        self.cfg.validate()
        self.projs = nn.ModuleList()
        self.refines = nn.ModuleList()
        for src, tgt in zip(source_channels, target_channels):
            self.projs.append(nn.Conv2d(src, tgt, 1))
            refine = nn.Conv2d(tgt, tgt, 3, padding=1)
            with torch.no_grad():
                refine.weight.mul_(self.cfg.gain)
                refine.bias.zero_()
            self.refines.append(refine)

    def forward(self, sources: tuple[torch.Tensor, torch.Tensor],
                target_shapes: tuple[tuple[int, ...], tuple[int, ...]]
                ) -> tuple[torch.Tensor, torch.Tensor]:
        outs = []
        for src, shape, proj, refine in zip(sources, target_shapes,
                                            self.projs, self.refines):
            x = refine(proj(_damp_grad(src, self.cfg.encoder_grad_scale)))
            x = F.interpolate(x, size=shape[-2:], mode="bilinear", align_corners=False)
            if x.shape[-3:] != tuple(shape[-3:]):
                raise ShapeError(f"bridge output {tuple(x.shape)} does not match "
                                 f"target {tuple(shape)}")
            outs.append(x)
        return outs[0], outs[1]


def adapt_channels(x: torch.Tensor, target_c: int) -> torch.Tensor:
    """Parameter-free channel matching for the bridge-less ablation: group
    mean when reducing, repeat when widening, linear resample otherwise."""
    c = x.shape[1]
    if c == target_c:
        return x
    if c % target_c == 0:
        b, _, h, w = x.shape
        return x.view(b, target_c, c // target_c, h, w).mean(dim=2)
    if target_c % c == 0:
        return x.repeat_interleave(target_c // c, dim=1)
    b, _, h, w = x.shape
    flat = x.permute(0, 2, 3, 1).reshape(b * h * w, 1, c)
    flat = F.interpolate(flat, size=target_c, mode="linear", align_corners=False)
    return flat.reshape(b, h, w, target_c).permute(0, 3, 1, 2).contiguous()


class DirectBridge(nn.Module):
    """Identity-style bridge: resize + parameter-free channel adaptation.

    Keeps restoration features flowing into the detector (and gradients
    back) without any learned projection.
    """

    def forward(self, sources, target_shapes):
        outs = []
        for src, shape in zip(sources, target_shapes):
            x = adapt_channels(src, shape[-3])
            x = F.interpolate(x, size=shape[-2:], mode="bilinear", align_corners=False)
            outs.append(x)
        return outs[0], outs[1]


def residual_predict(image: np.ndarray, restored: np.ndarray,
                     threshold: float = RESIDUAL_THRESHOLD) -> np.ndarray:
    """Naive baseline: shadow wherever restoration brightened the pixel by
    more than ``threshold`` (channel-mean of the residual)."""
    image = np.asarray(image)
    restored = np.asarray(restored)
    if image.shape != restored.shape:
        raise ShapeError(f"image {image.shape} vs restored {restored.shape}")
    residual = (restored.astype(np.float64) - image.astype(np.float64)).mean(axis=-1)
    return (residual > threshold).astype(np.uint8)
