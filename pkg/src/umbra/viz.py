"""Prediction PNGs and contour overlays for qualitative inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """4-neighbor inner boundary of a binary mask."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return (m & ~interior).astype(np.uint8)


def save_prediction_png(path: Path | str, prob: np.ndarray) -> None:
    arr = np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_overlay_png(path: Path | str, image: np.ndarray, mask: np.ndarray,
                     color: tuple[int, int, int] = (255, 32, 32),
                     fill_alpha: float = 0.25) -> None:
    """Input image with the mask contour painted and a translucent fill."""
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.float32)
    m = mask.astype(bool)
    tint = np.asarray(color, dtype=np.float32)
    rgb[m] = (1.0 - fill_alpha) * rgb[m] + fill_alpha * tint
    boundary = mask_boundary(mask).astype(bool)
    rgb[boundary] = tint
    Image.fromarray(rgb.astype(np.uint8)).save(path)
