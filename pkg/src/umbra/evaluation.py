"""Balanced-error-rate and RMSE metrics, batch evaluation over manifests,
report emission, and the residual-thresholding baseline.

Dataset-level BER pools pixel counts over all images (micro average); the
per-image macro average is emitted alongside. Predictions >= threshold
count as positive; a class absent from an image contributes zero error for
its term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import IntegrityError
from .restoration import RESIDUAL_THRESHOLD, RestorationUNet, residual_predict
from .samples import PRED_THRESHOLD, ShadowSample
from .training import ArchConfig, Checkpoint, JointModel, build_model


@dataclass
class PixelCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        return PixelCounts(self.tp + other.tp, self.tn + other.tn,
                           self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ber_terms(c: PixelCounts) -> tuple[float, float, float]:
    shadow = 100.0 * (1.0 - c.tp / (c.tp + c.fn)) if (c.tp + c.fn) > 0 else 0.0
    nonshadow = 100.0 * (1.0 - c.tn / (c.tn + c.fp)) if (c.tn + c.fp) > 0 else 0.0
    return shadow, nonshadow, (shadow + nonshadow) / 2.0


def compute_ber(pred: np.ndarray, gt: np.ndarray,
                threshold: float = PRED_THRESHOLD
                ) -> tuple[float, float, float, PixelCounts]:
    """BER of the shadow and non-shadow classes plus their mean, in percent."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise IntegrityError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    pb = pred >= threshold
    g = gt.astype(bool)
    counts = PixelCounts(tp=int(np.count_nonzero(pb & g)),
                         tn=int(np.count_nonzero(~pb & ~g)),
                         fp=int(np.count_nonzero(pb & ~g)),
                         fn=int(np.count_nonzero(~pb & g)))
    shadow, nonshadow, mean = _ber_terms(counts)
    return shadow, nonshadow, mean, counts


def compute_rmse(restored: np.ndarray, clean: np.ndarray) -> float:
    """Root-mean-square error over all pixels/channels, on the 0-255 scale."""
    restored = np.asarray(restored, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if restored.shape != clean.shape:
        raise IntegrityError(f"restored {restored.shape} != clean {clean.shape}")
    return float(np.sqrt(np.mean((restored - clean) ** 2)) * 255.0)


@dataclass
class BERReport:
    threshold: float
    per_image: list[dict] = field(default_factory=list)
    micro: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)

    @property
    def ber_mean(self) -> float:
        return self.micro["ber_mean"]

    def to_json(self) -> str:
        payload = {"threshold": self.threshold, "per_image": self.per_image,
                   "micro": self.micro, "macro": self.macro}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BERReport":
        d = json.loads(text)
        return cls(threshold=d["threshold"], per_image=d["per_image"],
                   micro=d["micro"], macro=d["macro"])

    def table(self) -> str:
        lines = [f"{'id':<16}{'BER':>8}{'shadow':>9}{'non-sh':>9}",
                 "-" * 42]
        for row in self.per_image:
            lines.append(f"{row['id']:<16}{row['ber_mean']:>8.2f}"
                         f"{row['ber_shadow']:>9.2f}{row['ber_nonshadow']:>9.2f}")
        lines.append("-" * 42)
        lines.append(f"{'micro':<16}{self.micro['ber_mean']:>8.2f}"
                     f"{self.micro['ber_shadow']:>9.2f}{self.micro['ber_nonshadow']:>9.2f}")
        lines.append(f"{'macro':<16}{self.macro['ber_mean']:>8.2f}"
                     f"{self.macro['ber_shadow']:>9.2f}{self.macro['ber_nonshadow']:>9.2f}")
        return "\n".join(lines)


def evaluate_predictions(predict: Callable[[ShadowSample], np.ndarray],
                         samples: Sequence[ShadowSample],
                         threshold: float = PRED_THRESHOLD) -> BERReport:
    """Score a predictor (sample -> [0,1] map at native GT size) over samples."""
    report = BERReport(threshold=threshold)
    pooled = PixelCounts()
    macro_acc = np.zeros(3)
    for s in samples:
        pred = predict(s)
        shadow, nonshadow, mean, counts = compute_ber(pred, s.mask, threshold)
        pooled = pooled + counts
        macro_acc += (shadow, nonshadow, mean)
        report.per_image.append({
            "id": s.id, "tp": counts.tp, "tn": counts.tn,
            "fp": counts.fp, "fn": counts.fn,
            "ber_shadow": shadow, "ber_nonshadow": nonshadow, "ber_mean": mean,
        })
    ms, mn, mm = _ber_terms(pooled)
    report.micro = {"ber_shadow": ms, "ber_nonshadow": mn, "ber_mean": mm,
                    "tp": pooled.tp, "tn": pooled.tn, "fp": pooled.fp, "fn": pooled.fn}
    n = max(1, len(samples))
    report.macro = {"ber_shadow": macro_acc[0] / n, "ber_nonshadow": macro_acc[1] / n,
                    "ber_mean": macro_acc[2] / n}
    return report


def _resize_prob(prob: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if prob.shape == size:
        return prob
    t = torch.from_numpy(prob.astype(np.float32))[None, None]
    out = torch.nn.functional.interpolate(t, size=size, mode="bilinear",
                                          align_corners=False)
    return out[0, 0].numpy()


def model_predictor(model: JointModel, side: int) -> Callable[[ShadowSample], np.ndarray]:
    """Inference closure: run at the configured side, resize the probability
    map back to the sample's native size."""
    from .samples import resize_sample

    def predict(sample: ShadowSample) -> np.ndarray:
        resized = resize_sample(sample, side)
        img = torch.from_numpy(resized.image).permute(2, 0, 1)[None]
        with torch.no_grad():
            outputs, _ = model(img, run_decoder=False)
        prob = outputs.final_pred[0, 0].numpy()
        return _resize_prob(prob, sample.size)

    return predict


def evaluate_model(ckpt: Checkpoint, samples: Sequence[ShadowSample],
                   threshold: float = PRED_THRESHOLD,
                   side: Optional[int] = None) -> BERReport:
    """Per-image inference + BER aggregation for a fine-tuned checkpoint."""
    model = build_model(ckpt)
    eval_side = side if side is not None else model.arch.side
    return evaluate_predictions(model_predictor(model, eval_side), samples, threshold)


def restoration_predictor(unet: RestorationUNet, side: int,
                          residual_threshold: float = RESIDUAL_THRESHOLD
                          ) -> Callable[[ShadowSample], np.ndarray]:
    from .samples import resize_sample

    def predict(sample: ShadowSample) -> np.ndarray:
        resized = resize_sample(sample, side)
        img = torch.from_numpy(resized.image).permute(2, 0, 1)[None]
        with torch.no_grad():
            restored, _, _ = unet(img)
        restored_np = restored[0].permute(1, 2, 0).numpy()
        mask = residual_predict(resized.image, restored_np, residual_threshold)
        return _resize_prob(mask.astype(np.float32), sample.size)

    return predict


def evaluate_residual_baseline(unet_ckpt: Checkpoint, samples: Sequence[ShadowSample],
                               residual_threshold: float = RESIDUAL_THRESHOLD,
                               threshold: float = PRED_THRESHOLD,
                               side: Optional[int] = None) -> BERReport:
    """Restoration forward + residual thresholding + BER pipeline."""
    if unet_ckpt.arch is None:
        raise IntegrityError("checkpoint sidecar lacks the architecture record")
    arch = ArchConfig.from_dict(unet_ckpt.arch)
    unet = RestorationUNet(arch.unet)
    unet.load_state_dict(unet_ckpt.params)
    unet.eval()
    eval_side = side if side is not None else arch.side
    return evaluate_predictions(
        restoration_predictor(unet, eval_side, residual_threshold), samples, threshold)


def write_report(report: BERReport, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    return path
