"""Procedural shadow triplets: clean image, shadowed image, exact mask.

Shadows are multiplicative attenuation under a Gaussian-softened mask, so the
image only darkens and equals the clean image outside the blurred support.
Optional confounders (dark hard-edged patches painted into clean AND image
identically) reproduce the look of shadow without being one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GenerationError
from .samples import (DatasetManifest, ManifestEntry, ShadowSample,
                      derive_distraction_gt, save_image, save_manifest, save_mask)

HEURISTIC_THRESHOLD = 0.02
_MAX_MASK_RETRIES = 60


@dataclass
class GenConfig:
    side: int = 160
    n_samples: int = 250
    seed: int = 0
    attenuation_range: tuple[float, float] = (0.3, 0.7)
    blob_count_range: tuple[int, int] = (1, 4)
    blob_area_frac_range: tuple[float, float] = (0.05, 0.35)
    confounder_prob: float = 0.5
    edge_blur_sigma_range: tuple[float, float] = (1.0, 3.0)

    def validate(self) -> None:
        a_lo, a_hi = self.attenuation_range
        f_lo, f_hi = self.blob_area_frac_range
        if not (0.0 < a_lo <= a_hi <= 1.0):
            raise ConfigError(f"attenuation_range must be within (0,1], got {self.attenuation_range}")
        if not (0.0 < f_lo <= f_hi < 1.0):
            raise ConfigError(f"blob_area_frac_range must be within (0,1), got {self.blob_area_frac_range}")
        if self.blob_count_range[0] < 1 or self.blob_count_range[0] > self.blob_count_range[1]:
            raise ConfigError(f"invalid blob_count_range {self.blob_count_range}")
        if not (0.0 <= self.confounder_prob <= 1.0):
            raise ConfigError(f"confounder_prob must be in [0,1], got {self.confounder_prob}")
        if self.edge_blur_sigma_range[0] > self.edge_blur_sigma_range[1]:
            raise ConfigError(f"invalid edge_blur_sigma_range {self.edge_blur_sigma_range}")
        if self.side < 32:
            raise ConfigError(f"side must be >= 32, got {self.side}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    """Textured clean background: gradient + smooth blotches + rectangles + grain."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) / side
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)[..., None]
    c0 = rng.uniform(0.35, 0.85, size=3).astype(np.float32)
    c1 = rng.uniform(0.35, 0.85, size=3).astype(np.float32)
    img = c0 + (c1 - c0) * ramp

    coarse = rng.normal(0.0, 1.0, size=(side // 8, side // 8, 3)).astype(np.float32)
    blotch = np.stack([gaussian_filter(np.kron(coarse[..., c], np.ones((8, 8))), 4.0)
                       for c in range(3)], axis=-1)
    img = img + 0.08 * blotch[:side, :side]

    for _ in range(rng.integers(2, 6)):
        w = int(rng.integers(side // 10, side // 3))
        h = int(rng.integers(side // 10, side // 3))
        y0 = int(rng.integers(0, side - h))
        x0 = int(rng.integers(0, side - w))
        tint = rng.uniform(-0.12, 0.12, size=3).astype(np.float32)
        img[y0:y0 + h, x0:x0 + w] += tint

    img = img + rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.15, 1.0).astype(np.float32)


def _one_blob(side: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """A smooth random blob: polar wobble polygon, blurred and rethresholded."""
    cy = rng.uniform(radius * 0.5, side - radius * 0.5)
    cx = rng.uniform(radius * 0.5, side - radius * 0.5)
    n_vert = 16
    wobble = rng.uniform(0.6, 1.4, size=n_vert)
    # periodic smoothing of the wobble so edges stay gentle
    wobble = np.convolve(np.r_[wobble[-2:], wobble, wobble[:2]], np.ones(5) / 5, "valid")
    angles = np.linspace(0, 2 * np.pi, n_vert, endpoint=False)
    ys = cy + radius * wobble * np.sin(angles)
    xs = cx + radius * wobble * np.cos(angles)

    from PIL import Image, ImageDraw
    im = Image.new("L", (side, side), 0)
    ImageDraw.Draw(im).polygon(list(zip(xs.tolist(), ys.tolist())), fill=255)
    blob = np.asarray(im, dtype=np.float32) / 255.0
    blob = gaussian_filter(blob, 1.5)
    return (blob >= 0.5).astype(np.uint8)


def _shadow_mask(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    f_lo, f_hi = cfg.blob_area_frac_range
    total_px = cfg.side * cfg.side
    for _ in range(_MAX_MASK_RETRIES):
        n_blobs = int(rng.integers(cfg.blob_count_range[0], cfg.blob_count_range[1] + 1))
        target = rng.uniform(f_lo, f_hi)
        # area split over blobs; radius from the per-blob share of the target
        shares = rng.dirichlet(np.ones(n_blobs)) * target
        mask = np.zeros((cfg.side, cfg.side), dtype=np.uint8)
        for share in shares:
            radius = max(3.0, np.sqrt(share * total_px / np.pi))
            mask |= _one_blob(cfg.side, radius, rng)
        frac = mask.sum() / total_px
        if f_lo <= frac <= f_hi:
            return mask
    raise GenerationError(
        f"could not draw a mask with area fraction in [{f_lo}, {f_hi}] "
        f"after {_MAX_MASK_RETRIES} attempts")


def _paint_confounder(clean: np.ndarray, image: np.ndarray, soft_mask: np.ndarray,
                      cfg: GenConfig, rng: np.random.Generator) -> None:
    """Dark hard-edged patch painted into clean and image identically."""
    side = cfg.side
    for _ in range(20):
        h = int(rng.integers(side // 10, side // 4))
        w = int(rng.integers(side // 10, side // 4))
        y0 = int(rng.integers(0, side - h))
        x0 = int(rng.integers(0, side - w))
        if soft_mask[y0:y0 + h, x0:x0 + w].max() < 1e-3:
            break
    else:
        return  # no shadow-free spot found; skip the confounder
    a = rng.uniform(*cfg.attenuation_range)
    base = clean[y0:y0 + h, x0:x0 + w].mean(axis=(0, 1)) * a
    patch = (base[None, None, :]
             + rng.normal(0.0, 0.01, size=(h, w, 3))).astype(np.float32)
    patch = np.clip(patch, 0.0, 1.0)
    if rng.random() < 0.5:  # sharp ellipse instead of rectangle
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        inside = (((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2) <= 1.0
    else:
        inside = np.ones((h, w), dtype=bool)
    region_clean = clean[y0:y0 + h, x0:x0 + w]
    region_image = image[y0:y0 + h, x0:x0 + w]
    region_clean[inside] = patch[inside]
    region_image[inside] = patch[inside]


def generate_triplet(cfg: GenConfig, rng: np.random.Generator,
                     sample_id: str = "synthetic") -> ShadowSample:
    """One triplet with exact mask and heuristic-derived distraction maps."""
    cfg.validate()
    clean = _background(cfg.side, rng)
    mask = _shadow_mask(cfg, rng)
    sigma = rng.uniform(*cfg.edge_blur_sigma_range)
    soft_mask = np.clip(gaussian_filter(mask.astype(np.float32), sigma), 0.0, 1.0)
    a = rng.uniform(*cfg.attenuation_range)
    image = clean * (1.0 - (1.0 - a) * soft_mask[..., None])
    if rng.random() < cfg.confounder_prob:
        _paint_confounder(clean, image, soft_mask, cfg, rng)
    image = image.astype(np.float32)

    pred = heuristic_detector(image, clean)
    fp_map, fn_map = derive_distraction_gt(pred.astype(np.float32), mask)
    sample = ShadowSample(image=image, mask=mask, clean=clean,
                          fp_map=fp_map, fn_map=fn_map, id=sample_id)
    sample.validate()
    return sample


def heuristic_detector(image: np.ndarray, clean: np.ndarray,
                       threshold: float = HEURISTIC_THRESHOLD) -> np.ndarray:
    """Residual thresholding against the known clean image.

    Deliberately imperfect near blurred shadow edges; blind to confounders
    (zero residual there). Feeds distraction ground-truth derivation.
    """
    residual = (clean - image).mean(axis=2)
    return (residual > threshold).astype(np.uint8)


def generate_dataset(cfg: GenConfig, out_dir: Path | str,
                     split: str = "train") -> DatasetManifest:
    """Write n_samples triplets + distraction maps + manifest under out_dir.

    Each sample draws from an independent generator seeded by (seed, index),
    so generation is order-independent and parallelizable.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "clean", "fp", "fn"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, i])
        sid = f"{split}-{i:05d}"
        s = generate_triplet(cfg, rng, sample_id=sid)
        entry = ManifestEntry(
            id=sid,
            image=f"images/{sid}.png",
            mask=f"masks/{sid}.png",
            clean=f"clean/{sid}.png",
            fp_map=f"fp/{sid}.png",
            fn_map=f"fn/{sid}.png",
        )
        save_image(out_dir / entry.image, s.image)
        save_mask(out_dir / entry.mask, s.mask)
        save_image(out_dir / entry.clean, s.clean)
        save_mask(out_dir / entry.fp_map, s.fp_map)
        save_mask(out_dir / entry.fn_map, s.fn_map)
        entries.append(entry)
    manifest = DatasetManifest(root=out_dir, split=split, entries=entries)
    save_manifest(manifest)
    return manifest
