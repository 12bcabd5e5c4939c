"""Receptive-field arithmetic for conv/pool/upsample chains, plus empirical
gradient-support measurement.

Two quantities are tracked per layer:

* ``jump`` — input pixels per output step. Convs multiply it by their
  stride, pools by their factor, upsampling divides by its factor.
* ``extent`` — cumulative support of one output unit on the input, via the
  additive recurrence extent += (k−1)·jump at each conv. Pools are treated
  as pure resamplers (no extent of their own); bilinear upsampling adds a
  2-tap smear (one output reads two input samples per axis) before dividing
  the jump.

For convs we also report the single-layer ``footprint`` k·jump per side:
in a conv/pool(2) ladder the i-th conv's footprint is k·2^(i−1) (area
2^(2(i−1))·k²), and in a conv/upsample(2) ladder it is k·(1/2)^(i−1),
which is the quantity the fine-context design constrains.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

GRAD_SUPPORT_EPS = 1e-12


@dataclass
class Conv:
    kernel: int
    stride: int = 1
    name: str = "conv"

    def validate(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")


@dataclass
class Pool:
    factor: float = 2.0
    name: str = "pool"

    def validate(self) -> None:
        if self.factor <= 0:
            raise ConfigError(f"pool factor must be > 0, got {self.factor}")


@dataclass
class Upsample:
    factor: float = 2.0
    mode: str = "bilinear"
    name: str = "upsample"

    def validate(self) -> None:
        if self.factor <= 0:
            raise ConfigError(f"upsample factor must be > 0, got {self.factor}")
        if self.mode not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample mode must be bilinear or nearest, got {self.mode}")


Layer = Union[Conv, Pool, Upsample]
ArchSpec = Sequence[Layer]


@dataclass
class LayerRF:
    name: str
    kind: str
    extent: float          # cumulative support per side, in input pixels
    jump: float            # input pixels per output step, after this layer
    footprint: Optional[float] = None  # k·jump_in for convs


@dataclass
class RFResult:
    layers: list[LayerRF] = field(default_factory=list)

    @property
    def extent(self) -> float:
        return self.layers[-1].extent if self.layers else 1.0

    @property
    def jump(self) -> float:
        return self.layers[-1].jump if self.layers else 1.0

    def conv_footprints(self) -> list[float]:
        return [l.footprint for l in self.layers if l.kind == "conv"]


def theoretical_rf(spec: ArchSpec) -> RFResult:
    """Walk the chain accumulating jump, extent and per-conv footprints."""
    jump = 1.0
    extent = 1.0
    result = RFResult()
    for layer in spec:
        layer.validate()
        if isinstance(layer, Conv):
            footprint = layer.kernel * jump
            extent += (layer.kernel - 1) * jump
            jump *= layer.stride
            result.layers.append(LayerRF(layer.name, "conv", extent, jump, footprint))
        elif isinstance(layer, Pool):
            jump *= layer.factor
            result.layers.append(LayerRF(layer.name, "pool", extent, jump))
        elif isinstance(layer, Upsample):
            if layer.mode == "bilinear":
                extent += jump  # each output sample interpolates 2 inputs per axis
            jump /= layer.factor
            result.layers.append(LayerRF(layer.name, "upsample", extent, jump))
        else:
            raise ConfigError(f"unknown layer type {type(layer).__name__}")
    return result


class _Decimate(nn.Module):
    """Stride-f subsampling; the empirical realization of a pure-resampler pool."""

    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return x[..., ::self.factor, ::self.factor]


class _Interp(nn.Module):
    def __init__(self, factor: float, mode: str):
        super().__init__()
        self.factor = factor
        self.mode = mode

    def forward(self, x):
        return F.interpolate(x, scale_factor=self.factor, mode=self.mode,
                             align_corners=False if self.mode == "bilinear" else None)


def build_chain(spec: ArchSpec, seed: int = 0) -> nn.Sequential:
    """Single-channel linear realization of an ArchSpec for empirical checks.

    Convs are randomly weighted, bias-free, padded to keep positions aligned;
    activations are omitted so gradient support is weight-independent almost
    surely.
    """
    torch.manual_seed(seed)
    mods: list[nn.Module] = []
    for layer in spec:
        layer.validate()
        if isinstance(layer, Conv):
            conv = nn.Conv2d(1, 1, layer.kernel, stride=layer.stride,
                             padding=layer.kernel // 2, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.rand_like(conv.weight) + 0.25)
            mods.append(conv)
        elif isinstance(layer, Pool):
            if abs(layer.factor - round(layer.factor)) > 1e-9:
                raise ConfigError("empirical chains need integer pool factors")
            mods.append(_Decimate(int(round(layer.factor))))
        elif isinstance(layer, Upsample):
            mods.append(_Interp(layer.factor, layer.mode))
    return nn.Sequential(*mods)


def empirical_rf(model: Callable[[torch.Tensor], torch.Tensor], input_side: int,
                 output_pixel: Optional[tuple[int, int]] = None,
                 n_draws: int = 1, seed: int = 0,
                 rebuild: Optional[Callable[[int], Callable]] = None
                 ) -> tuple[float, float]:
    """Gradient-support extent of one output unit w.r.t. the input.

    Returns the (height, width) of the tight bounding box where
    |d output / d input| > 1e-12, averaged over ``n_draws`` weight draws
    (``rebuild(seed)`` supplies fresh models when given). A selector model
    may return any B×C×h×w tensor; the probed unit is channel 0 at
    ``output_pixel`` (default: center).
    """
    extents = []
    for draw in range(n_draws):
        net = rebuild(seed + draw) if rebuild is not None else model
        x = torch.zeros(1, 1, input_side, input_side, dtype=torch.float64,
                        requires_grad=True)
        mods = net.double() if isinstance(net, nn.Module) else net
        out = mods(x)
        oh, ow = out.shape[-2:]
        py, px = output_pixel if output_pixel is not None else (oh // 2, ow // 2)
        out[0, 0, py, px].backward()
        g = x.grad.abs().squeeze()
        support = g > GRAD_SUPPORT_EPS
        if not support.any():
            warnings.warn("zero gradient everywhere; reporting extent 0")
            extents.append((0.0, 0.0))
            continue
        rows = torch.where(support.any(dim=1))[0]
        cols = torch.where(support.any(dim=0))[0]
        extents.append((float(rows[-1] - rows[0] + 1), float(cols[-1] - cols[0] + 1)))
    h = sum(e[0] for e in extents) / len(extents)
    w = sum(e[1] for e in extents) / len(extents)
    return h, w


def backbone_chain(n_stages: int, kernel: int = 3) -> list[Layer]:
    """Stage ladder of the detector backbone: stride-2 conv + unit conv per stage."""
    layers: list[Layer] = []
    for i in range(1, n_stages + 1):
        layers.append(Conv(kernel, 2, name=f"stage{i}-conv1"))
        layers.append(Conv(kernel, 1, name=f"stage{i}-conv2"))
    return layers


def fine_context_chain(entry_side: int, depth: int, growth_px: int,
                       kernel: int = 3) -> list[Layer]:
    """Fine-context ladder: conv, then upsample by (side+growth)/side, per block."""
    layers: list[Layer] = []
    side = entry_side
    for i in range(1, depth + 1):
        layers.append(Conv(kernel, 1, name=f"fcd{i}-conv"))
        factor = (side + growth_px) / side
        layers.append(Upsample(factor, name=f"fcd{i}-up"))
        side += growth_px
    return layers


def rf_report(image_side: int, fcd_depth: int = 4, fcd_growth: int = 50,
              run_empirical: bool = True, empirical_side: int = 64) -> dict:
    """Theoretical (and optionally empirical) receptive fields of the
    detector's backbone stages and fine-context blocks.

    The empirical column is measured on single-channel linear stand-in
    chains; a ``mismatch`` flag marks disagreement beyond ±1 px against the
    cumulative extent.
    """
    report: dict = {"image_side": image_side, "columns": {}}
    entry_side = image_side // 2  # fine-context block consumes the stride-2 tap

    bb_spec = backbone_chain(5)
    bb_rf = theoretical_rf(bb_spec)
    fcd_prefix = backbone_chain(1)  # the fine chain hangs off stage 1
    fcd_spec = fcd_prefix + fine_context_chain(entry_side, fcd_depth, fcd_growth)
    fcd_rf = theoretical_rf(fcd_spec)

    def conv_rows(spec, rf):
        rows = []
        for layer_spec, layer_rf in zip(spec, rf.layers):
            if layer_rf.kind != "conv":
                continue
            rows.append({"layer": layer_rf.name, "extent": layer_rf.extent,
                         "jump": layer_rf.jump, "footprint": layer_rf.footprint})
        return rows

    report["columns"]["backbone"] = conv_rows(bb_spec, bb_rf)
    report["columns"]["fine_context"] = conv_rows(fcd_spec, fcd_rf)

    if run_empirical:
        for key, spec in (("backbone", bb_spec), ("fine_context", fcd_spec)):
            theory = theoretical_rf(spec).extent
            # measurement side large enough to contain the support
            side = empirical_side
            while side < theory * 1.5 + 8:
                side *= 2
            measured = empirical_rf(build_chain(spec), int(side),
                                    rebuild=lambda s, spec=spec: build_chain(spec, s),
                                    n_draws=2)
            report["columns"][key + "_empirical"] = {
                "extent_h": measured[0], "extent_w": measured[1],
                "theory_extent": theory,
                "mismatch": abs(measured[0] - theory) > 1.0 or abs(measured[1] - theory) > 1.0,
            }
    return report


def render_report(report: dict) -> str:
    """Markdown tables, one per analyzed chain."""
    lines = [f"# receptive fields @ input side {report['image_side']}", ""]
    for col in ("backbone", "fine_context"):
        lines.append(f"## {col}")
        lines.append("| layer | extent | jump | footprint |")
        lines.append("|---|---:|---:|---:|")
        for row in report["columns"][col]:
            lines.append(f"| {row['layer']} | {row['extent']:.2f} "
                         f"| {row['jump']:.3f} | {row['footprint']:.3f} |")
        emp = report["columns"].get(col + "_empirical")
        if emp:
            flag = " **MISMATCH**" if emp["mismatch"] else ""
            lines.append("")
            lines.append(f"empirical extent {emp['extent_h']:.1f}×{emp['extent_w']:.1f} "
                         f"vs theory {emp['theory_extent']:.1f}{flag}")
        lines.append("")
    return "\n".join(lines)


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
