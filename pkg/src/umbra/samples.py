"""Sample model, manifest handling, image/mask I/O and basic transforms.

A dataset on disk is a directory with a ``manifest_<split>.json`` file listing
relative paths per sample. Images are 8-bit PNG/JPEG; masks are 8-bit
grayscale PNG with 0 = non-shadow, 255 = shadow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, IntegrityError, LoadError

MASK_THRESHOLD = 128  # on 8-bit input
PRED_THRESHOLD = 0.5  # default binarization for [0,1] prediction maps
MIN_SIDE = 32


@dataclass
class ShadowSample:
    """One training/eval unit.

    image, clean are float32 H×W×3 in [0,1]; mask, fp_map, fn_map are uint8
    H×W in {0,1}. fp_map lives only off-shadow, fn_map only on-shadow.
    """

    image: np.ndarray
    mask: np.ndarray
    clean: Optional[np.ndarray] = None
    fp_map: Optional[np.ndarray] = None
    fn_map: Optional[np.ndarray] = None
    id: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape[0], self.mask.shape[1]

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise IntegrityError(f"{self.id}: image must be H×W×3, got {self.image.shape}")
        if self.mask.shape != (h, w):
            raise IntegrityError(f"{self.id}: mask shape {self.mask.shape} != image {h}×{w}")
        for name, arr in (("clean", self.clean), ("fp_map", self.fp_map), ("fn_map", self.fn_map)):
            if arr is not None and arr.shape[:2] != (h, w):
                raise IntegrityError(f"{self.id}: {name} shape {arr.shape} != image {h}×{w}")
        if not np.isin(self.mask, (0, 1)).all():
            raise IntegrityError(f"{self.id}: mask is not binary after loading")
        if self.fp_map is not None and int((self.fp_map & self.mask).sum()) != 0:
            raise IntegrityError(f"{self.id}: fp_map overlaps shadow mask")
        if self.fn_map is not None and int((self.fn_map & (1 - self.mask)).sum()) != 0:
            raise IntegrityError(f"{self.id}: fn_map leaks outside shadow mask")


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    clean: Optional[str] = None
    fp_map: Optional[str] = None
    fn_map: Optional[str] = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)


def manifest_path(root: Path | str, split: str) -> Path:
    return Path(root) / f"manifest_{split}.json"


def save_manifest(manifest: DatasetManifest) -> Path:
    path = manifest_path(manifest.root, manifest.split)
    records = []
    for e in manifest.entries:
        rec = {"id": e.id, "image": e.image, "mask": e.mask}
        for key in ("clean", "fp_map", "fn_map"):
            if getattr(e, key) is not None:
                rec[key] = getattr(e, key)
        records.append(rec)
    payload = {"split": manifest.split, "entries": records}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def load_manifest(root: Path | str, split: str) -> DatasetManifest:
    root = Path(root)
    path = manifest_path(root, split)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    entries = [ManifestEntry(**rec) for rec in payload["entries"]]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"duplicate sample ids in {path}")
    for e in entries:
        for key in ("image", "mask", "clean", "fp_map", "fn_map"):
            rel = getattr(e, key)
            if rel is not None and not (root / rel).is_file():
                raise LoadError(f"{e.id}: missing file {root / rel}")
    return DatasetManifest(root=root, split=payload.get("split", split), entries=entries)


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise LoadError(f"missing file: {path}") from exc
    except OSError as exc:
        raise LoadError(f"cannot decode image: {path}") from exc
    return arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError as exc:
        raise LoadError(f"missing file: {path}") from exc
    except OSError as exc:
        raise LoadError(f"cannot decode mask: {path}") from exc
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def save_image(path: Path | str, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask(path: Path | str, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path)


def load_sample(entry: ManifestEntry, root: Path | str) -> ShadowSample:
    """Load one manifest entry; tensors in [0,1], mask binarized at 128."""
    root = Path(root)
    image = _read_rgb(root / entry.image)
    mask = _read_mask(root / entry.mask)
    clean = _read_rgb(root / entry.clean) if entry.clean else None
    fp_map = _read_mask(root / entry.fp_map) if entry.fp_map else None
    fn_map = _read_mask(root / entry.fn_map) if entry.fn_map else None
    fp_map, fn_map = _reconcile_distraction(mask, fp_map, fn_map)
    sample = ShadowSample(image=image, mask=mask, clean=clean,
                          fp_map=fp_map, fn_map=fn_map, id=entry.id)
    sample.validate()
    return sample


def load_split(manifest: DatasetManifest) -> list[ShadowSample]:
    return [load_sample(e, manifest.root) for e in manifest.entries]


def _reconcile_distraction(mask, fp_map, fn_map):
    # FP lives only off-shadow, FN only on-shadow; resizing can break this.
    if fp_map is not None:
        fp_map = (fp_map & (1 - mask)).astype(np.uint8)
    if fn_map is not None:
        fn_map = (fn_map & mask).astype(np.uint8)
    return fp_map, fn_map


def _resize_image(arr: np.ndarray, side: int) -> np.ndarray:
    t = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def _resize_mask(arr: np.ndarray, side: int) -> np.ndarray:
    t = torch.from_numpy(arr.astype(np.float32)).unsqueeze(0).unsqueeze(0)
    out = F.interpolate(t, size=(side, side), mode="nearest")
    return (out.squeeze().numpy() >= 0.5).astype(np.uint8)


def resize_sample(sample: ShadowSample, side: int) -> ShadowSample:
    """Resize to side×side: bilinear for images, nearest for masks."""
    if side < MIN_SIDE:
        raise ConfigError(f"side must be >= {MIN_SIDE}, got {side}")
    if sample.size == (side, side):
        return sample
    image = _resize_image(sample.image, side)
    mask = _resize_mask(sample.mask, side)
    clean = _resize_image(sample.clean, side) if sample.clean is not None else None
    fp_map = _resize_mask(sample.fp_map, side) if sample.fp_map is not None else None
    fn_map = _resize_mask(sample.fn_map, side) if sample.fn_map is not None else None
    fp_map, fn_map = _reconcile_distraction(mask, fp_map, fn_map)
    return replace(sample, image=image, mask=mask, clean=clean,
                   fp_map=fp_map, fn_map=fn_map)


def flip_sample(sample: ShadowSample) -> ShadowSample:
    """Horizontal flip applied jointly to every tensor of the sample."""
    def fl(arr):
        return None if arr is None else np.ascontiguousarray(arr[:, ::-1])
    return replace(sample, image=fl(sample.image), mask=fl(sample.mask),
                   clean=fl(sample.clean), fp_map=fl(sample.fp_map),
                   fn_map=fl(sample.fn_map))


def augment_flip(sample: ShadowSample, rng: np.random.Generator) -> ShadowSample:
    """With probability 0.5, flip the whole sample horizontally."""
    if rng.random() < 0.5:
        return flip_sample(sample)
    return sample


def derive_distraction_gt(pred: np.ndarray, gt: np.ndarray,
                          threshold: float = PRED_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """False-positive / false-negative maps of a prediction against its GT.

    pred is a real map in [0,1] (binarized at ``threshold``, >= counts as
    positive); gt is binary. Returns (fp_map, fn_map) with fp off-shadow only
    and fn on-shadow only.
    """
    if pred.shape != gt.shape:
        raise IntegrityError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    pred_bin = (np.asarray(pred) >= threshold).astype(np.uint8)
    gt = np.asarray(gt).astype(np.uint8)
    fp_map = (pred_bin & (1 - gt)).astype(np.uint8)
    fn_map = ((1 - pred_bin) & gt).astype(np.uint8)
    return fp_map, fn_map
