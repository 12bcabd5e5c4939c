"""Training objectives: class-balanced BCE, distraction loss, per-scale
detection loss, restoration MSE, and the joint total.

All losses are plain torch expressions of their prediction inputs, so
analytic gradients are available for finite-difference verification. Pixel
sums are normalized to per-pixel means by default; ``reduction="sum"``
selects the raw-sum variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

EPS_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 2.0
    eps_clamp: float = EPS_CLAMP

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 < self.eps_clamp < 0.01):
            raise ValueError(f"eps_clamp must be in (0, 0.01), got {self.eps_clamp}")


def _check_pair(x: torch.Tensor, y: torch.Tensor, name: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError(f"{name}: target map is not binary")


def _class_weights(y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # a weights the positive term by the negative fraction and vice versa;
    # degenerate single-class maps fall back to 0.5/0.5.
    n = y.numel()
    n_pos = y.sum()
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        half = torch.tensor(0.5, dtype=y.dtype if y.is_floating_point() else torch.get_default_dtype())
        return half, half
    return n_neg / n, n_pos / n


def _reduce(total: torch.Tensor, n: int, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return total / n
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def weighted_bce(x: torch.Tensor, y: torch.Tensor, eps: float = EPS_CLAMP,
                 reduction: str = "mean") -> torch.Tensor:
    """Class-balanced binary cross entropy over a prediction map in (0,1)."""
    _check_pair(x, y, "weighted_bce")
    y = y.to(x.dtype)
    a, b = _class_weights(y)
    xc = x.clamp(eps, 1.0 - eps)
    total = -(a * y * torch.log(xc) + b * (1.0 - y) * torch.log(1.0 - xc)).sum()
    return _reduce(total, y.numel(), reduction)


def distraction_loss(x: torch.Tensor, y: torch.Tensor, y_fpd: torch.Tensor,
                     y_fnd: torch.Tensor, eps: float = EPS_CLAMP,
                     reduction: str = "mean") -> torch.Tensor:
    """Balanced BCE restricted to the false-negative / false-positive
    distraction supports of the ground truth."""
    _check_pair(x, y, "distraction_loss")
    _check_pair(x, y_fpd, "distraction_loss(fpd)")
    _check_pair(x, y_fnd, "distraction_loss(fnd)")
    y = y.to(x.dtype)
    y_fpd = y_fpd.to(x.dtype)
    y_fnd = y_fnd.to(x.dtype)
    a, b = _class_weights(y)
    xc = x.clamp(eps, 1.0 - eps)
    total = -(a * y_fnd * y * torch.log(xc)
              + b * y_fpd * (1.0 - y) * torch.log(1.0 - xc)).sum()
    return _reduce(total, y.numel(), reduction)


def shadow_loss(x: torch.Tensor, y: torch.Tensor,
                y_fpd: Optional[torch.Tensor] = None,
                y_fnd: Optional[torch.Tensor] = None,
                eps: float = EPS_CLAMP, reduction: str = "mean",
                composition: str = "scalar") -> torch.Tensor:
    """s + s*d where s is the balanced BCE and d the distraction loss.

    The product composes the two reduced scalars by default;
    ``composition="pixel"`` multiplies per-pixel terms before reduction.
    Absent distraction maps make d = 0.
    """
    s = weighted_bce(x, y, eps=eps, reduction=reduction)
    if y_fpd is None or y_fnd is None:
        return s
    if composition == "scalar":
        d = distraction_loss(x, y, y_fpd, y_fnd, eps=eps, reduction=reduction)
        return s + s * d
    if composition == "pixel":
        yf = y.to(x.dtype)
        fpd = y_fpd.to(x.dtype)
        fnd = y_fnd.to(x.dtype)
        a, b = _class_weights(yf)
        xc = x.clamp(eps, 1.0 - eps)
        s_px = -(a * yf * torch.log(xc) + b * (1.0 - yf) * torch.log(1.0 - xc))
        d_px = -(a * fnd * yf * torch.log(xc) + b * fpd * (1.0 - yf) * torch.log(1.0 - xc))
        return _reduce((s_px + s_px * d_px).sum(), yf.numel(), reduction)
    raise ValueError(f"unknown composition {composition!r}")


def detection_loss(outputs, y: torch.Tensor,
                   y_fpd: Optional[torch.Tensor] = None,
                   y_fnd: Optional[torch.Tensor] = None,
                   weights: Optional[LossWeights] = None,
                   reduction: str = "mean") -> torch.Tensor:
    """Sum over prediction scales of alpha*shadow + beta*FP-BCE + gamma*FN-BCE.

    ``outputs`` needs side_preds / fp_preds / fn_preds lists and a final_pred
    (see detector.ScaleOutputs). The fused final prediction contributes its
    alpha term only. Without distraction ground truth the beta/gamma terms
    and the distraction part of the shadow loss drop out.
    """
    w = weights or LossWeights()
    w.validate()
    eps = w.eps_clamp
    have_distraction = y_fpd is not None and y_fnd is not None
    total = None
    for side, fp_pred, fn_pred in zip(outputs.side_preds, outputs.fp_preds,
                                      outputs.fn_preds):
        term = w.alpha * shadow_loss(side, y, y_fpd if have_distraction else None,
                                     y_fnd if have_distraction else None,
                                     eps=eps, reduction=reduction)
        if have_distraction and fp_pred is not None:
            term = term + w.beta * weighted_bce(fp_pred, y_fpd,
                                                eps=eps, reduction=reduction)
        if have_distraction and fn_pred is not None:
            term = term + w.gamma * weighted_bce(fn_pred, y_fnd,
                                                 eps=eps, reduction=reduction)
        total = term if total is None else total + term
    final_term = w.alpha * shadow_loss(outputs.final_pred, y,
                                       y_fpd if have_distraction else None,
                                       y_fnd if have_distraction else None,
                                       eps=eps, reduction=reduction)
    return final_term if total is None else total + final_term


def restoration_loss(restored: torch.Tensor, clean: Optional[torch.Tensor],
                     reduction: str = "mean") -> torch.Tensor:
    """Squared error against the clean target image."""
    if clean is None:
        raise ValueError("restoration loss requires a clean target image")
    if restored.shape != clean.shape:
        raise ValueError(f"restoration_loss: shape mismatch "
                         f"{tuple(restored.shape)} vs {tuple(clean.shape)}")
    total = ((restored - clean) ** 2).sum()
    return _reduce(total, clean.numel(), reduction)


def total_loss(det: torch.Tensor, res: torch.Tensor) -> torch.Tensor:
    """Joint objective: detection plus restoration."""
    return det + res
