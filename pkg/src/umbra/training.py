"""Two-phase optimization: restoration pretraining and joint fine-tuning,
plus checkpoint I/O, stochastic weight averaging and seeding.

Checkpoints are a torch archive of named tensors next to a JSON sidecar
carrying iteration, phase, a config fingerprint and the architecture needed
to rebuild the model.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig
from .detector import FCDConfig, ScaleOutputs, ShadowDetector, canonical_mode
from .errors import CheckpointError, ConfigError
from .losses import LossWeights, detection_loss, restoration_loss, total_loss
from .restoration import (CFLConfig, DirectBridge, FeatureBridge,
                          RestorationUNet, UNetConfig)
from .samples import ShadowSample, augment_flip


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    pretrain_epochs: int = 50
    finetune_iters: int = 2000
    swa_points: tuple[int, ...] = (1333, 1666, 2000)
    seed: int = 0

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(batch_size=16, pretrain_epochs=500, finetune_iters=6000,
                   swa_points=(4000, 5000, 6000))

    def validate(self) -> None:
        if min(self.lr, self.momentum, self.weight_decay) < 0 or self.lr == 0:
            raise ConfigError("lr must be positive; momentum/weight_decay nonnegative")
        if self.batch_size < 1 or self.pretrain_epochs < 1 or self.finetune_iters < 1:
            raise ConfigError("batch_size/pretrain_epochs/finetune_iters must be >= 1")
        if not self.swa_points:
            raise ConfigError("swa_points must be nonempty")
        if min(self.swa_points) < 1 or max(self.swa_points) > self.finetune_iters:
            raise ConfigError(f"swa_points {self.swa_points} must lie in "
                              f"[1, {self.finetune_iters}]")


@dataclass
class ArchConfig:
    """Everything needed to rebuild a model for a checkpoint."""

    side: int = 160
    mode: str = "bb_ccd_fcd"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fcd: FCDConfig = field(default_factory=FCDConfig)
    ccd_width: int = 64
    unet: UNetConfig = field(default_factory=UNetConfig)
    cfl: CFLConfig = field(default_factory=CFLConfig)

    def validate(self) -> None:
        if self.side % 32 != 0 or self.side < 32:
            raise ConfigError(f"image side must be a positive multiple of 32, got {self.side}")
        self.mode = canonical_mode(self.mode)
        self.backbone.validate()
        self.fcd.validate()
        self.unet.validate()
        self.cfl.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        return cls(side=d["side"], mode=d["mode"],
                   backbone=BackboneConfig(**_tupled(d["backbone"], "channels")),
                   fcd=FCDConfig(**d["fcd"]),
                   ccd_width=d["ccd_width"],
                   unet=UNetConfig(**_tupled(d["unet"], "enc_channels")),
                   cfl=CFLConfig(**_tupled(d["cfl"], "source_layers")))

    def fingerprint(self, scope: str = "joint") -> str:
        """Stable hash of the architecture; scope 'restoration' covers only
        the parts a pretraining checkpoint depends on."""
        d = self.to_dict()
        if scope == "restoration":
            d = {"unet": d["unet"]}
        blob = json.dumps({"scope": scope, **d}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _tupled(d: dict, key: str) -> dict:
    d = dict(d)
    if key in d and isinstance(d[key], list):
        d[key] = tuple(d[key])
    return d


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    iteration: int
    fingerprint: str
    phase: str
    arch: Optional[dict] = None


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt.params, tmp)
    os.replace(tmp, path)
    meta = {"iteration": ckpt.iteration, "fingerprint": ckpt.fingerprint,
            "phase": ckpt.phase, "arch": ckpt.arch}
    sidecar = path.with_suffix(".json")
    tmp_meta = sidecar.with_suffix(".json.tmp")
    tmp_meta.write_text(json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp_meta, sidecar)
    return path


def load_checkpoint(path: Path | str,
                    expected_fingerprint: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.is_file() or not sidecar.is_file():
        raise CheckpointError(f"checkpoint or sidecar missing at {path}")
    meta = json.loads(sidecar.read_text())
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"fingerprint mismatch: checkpoint {meta['fingerprint']} vs "
            f"expected {expected_fingerprint}")
    params = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(params=params, iteration=meta["iteration"],
                      fingerprint=meta["fingerprint"], phase=meta["phase"],
                      arch=meta.get("arch"))


class JointModel(nn.Module):
    """Detector plus, in bridge-fed modes, the restoration network whose
    encoder features are injected into the detector's L2/L5 taps.

    The restoration network's normalization layers keep their pretrained
    running statistics during fine-tuning (frozen, eval-mode), so the
    bridge-fed features the detector adapts to are the same ones it sees at
    inference.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.mode = arch.mode
        self.detector = ShadowDetector(mode=arch.mode, backbone_cfg=arch.backbone,
                                       fcd_cfg=arch.fcd, ccd_width=arch.ccd_width)
        self.uses_restoration = self.mode in ("r2d_no_cfl", "r2d_full")
        if self.uses_restoration:
            self.restoration = RestorationUNet(arch.unet)
            if self.mode == "r2d_full":
                self.bridge = FeatureBridge(self.restoration.bridge_channels,
                                            self.detector.injection_channels,
                                            arch.cfl)
            else:
                self.bridge = DirectBridge()

    def train(self, mode: bool = True) -> "JointModel":
        super().train(mode)
        if mode and self.uses_restoration:
            for m in self.restoration.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def forward(self, image: torch.Tensor,
                run_decoder: bool = True) -> tuple[ScaleOutputs, Optional[torch.Tensor]]:
        if not self.uses_restoration:
            return self.detector(image), None
        if run_decoder:
            restored, r1, r2 = self.restoration(image)
        else:
            restored = None
            r1, r2 = self.restoration.encode(image)
        c2_ch, c5_ch = self.detector.injection_channels
        b = image.shape[0]
        s = image.shape[-1]
        shapes = ((b, c2_ch, s // 4, s // 4), (b, c5_ch, s // 32, s // 32))
        injections = self.bridge((r1, r2), shapes)
        outputs = self.detector(image, injections=injections)
        return outputs, restored


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _decay_param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    # keep weight decay off normalization affine terms and biases
    decay, no_decay = [], []
    norm_params = set()
    for m in model.modules():
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)):
            norm_params.update(id(p) for p in m.parameters(recurse=False))
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if id(p) in norm_params or name.endswith(".bias"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(_decay_param_groups(model, cfg.weight_decay),
                           lr=cfg.lr, momentum=cfg.momentum)


def _to_tensor_batch(samples: Sequence[ShadowSample],
                     with_clean: bool, with_distraction: bool):
    imgs = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).unsqueeze(1).float()
    clean = None
    if with_clean:
        clean = torch.from_numpy(np.stack([s.clean for s in samples])).permute(0, 3, 1, 2)
    fpd = fnd = None
    if with_distraction:
        fpd = torch.from_numpy(np.stack([s.fp_map for s in samples])).unsqueeze(1).float()
        fnd = torch.from_numpy(np.stack([s.fn_map for s in samples])).unsqueeze(1).float()
    return imgs, masks, clean, fpd, fnd


def _batches(dataset: Sequence[ShadowSample], batch_size: int,
             rng: np.random.Generator, augment: bool = True
             ) -> Iterator[list[ShadowSample]]:
    """Endless shuffled epochs of augmented batches."""
    n = len(dataset)
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            if augment:
                batch = [augment_flip(s, rng) for s in batch]
            yield batch


def pretrain_restoration(dataset: Sequence[ShadowSample], cfg: TrainConfig,
                         arch: ArchConfig) -> tuple[Checkpoint, list[float]]:
    """Optimize the restoration network alone with the squared-error loss.

    Returns the final checkpoint and the per-step loss curve.
    """
    cfg.validate()
    arch.validate()
    if any(s.clean is None for s in dataset):
        raise ConfigError("pretraining requires clean images for every sample")
    rng = seed_everything(cfg.seed)
    unet = RestorationUNet(arch.unet)
    unet.train()
    opt = make_optimizer(unet, cfg)
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    losses: list[float] = []
    batches = _batches(dataset, cfg.batch_size, rng)
    step = 0
    for _ in range(cfg.pretrain_epochs):
        for _ in range(steps_per_epoch):
            batch = next(batches)
            imgs, _, clean, _, _ = _to_tensor_batch(batch, True, False)
            restored, _, _ = unet(imgs)
            loss = restoration_loss(restored, clean)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
    ckpt = Checkpoint(params={k: v.detach().clone() for k, v in unet.state_dict().items()},
                      iteration=step, fingerprint=arch.fingerprint("restoration"),
                      phase="pretrain", arch=arch.to_dict())
    return ckpt, losses


def finetune_r2d(dataset: Sequence[ShadowSample], pretrain_ckpt: Optional[Checkpoint],
                 cfg: TrainConfig, arch: ArchConfig,
                 loss_weights: Optional[LossWeights] = None
                 ) -> tuple[list[Checkpoint], list[float], JointModel]:
    """Joint fine-tuning in the configured ablation mode.

    Triplet datasets train with detection + restoration loss; pair-only
    datasets drop the restoration term but keep gradients flowing through
    the bridge into the encoder. Checkpoints are taken at cfg.swa_points.
    Returns (checkpoints, loss curve, trained model).
    """
    cfg.validate()
    arch.validate()
    rng = seed_everything(cfg.seed)
    model = JointModel(arch)
    if model.uses_restoration:
        if pretrain_ckpt is None:
            raise CheckpointError(f"mode {arch.mode} requires a pretraining checkpoint")
        expected = arch.fingerprint("restoration")
        if pretrain_ckpt.fingerprint != expected:
            raise CheckpointError(
                f"pretraining checkpoint fingerprint {pretrain_ckpt.fingerprint} does "
                f"not match restoration config {expected}")
        model.restoration.load_state_dict(pretrain_ckpt.params)
    elif pretrain_ckpt is not None:
        raise CheckpointError(f"mode {arch.mode} does not consume a pretraining checkpoint")

    model.train()
    opt = make_optimizer(model, cfg)
    weights = loss_weights or LossWeights()
    has_clean = all(s.clean is not None for s in dataset)
    has_distraction = all(s.fp_map is not None and s.fn_map is not None for s in dataset)
    use_res_loss = model.uses_restoration and has_clean

    ckpts: list[Checkpoint] = []
    losses: list[float] = []
    fingerprint = arch.fingerprint("joint")
    batches = _batches(dataset, cfg.batch_size, rng)
    for step in range(1, cfg.finetune_iters + 1):
        batch = next(batches)
        imgs, masks, clean, fpd, fnd = _to_tensor_batch(batch, has_clean, has_distraction)
        outputs, restored = model(imgs, run_decoder=use_res_loss)
        det = detection_loss(outputs, masks, fpd, fnd, weights)
        loss = total_loss(det, restoration_loss(restored, clean)) if use_res_loss else det
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step in cfg.swa_points:
            ckpts.append(Checkpoint(
                params={k: v.detach().clone() for k, v in model.state_dict().items()},
                iteration=step, fingerprint=fingerprint, phase="finetune",
                arch=arch.to_dict()))
    return ckpts, losses, model


def swa_average(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean of checkpoints (float64 accumulation, exact cast
    back). Integer-dtype tensors are copied from the last checkpoint."""
    if len(ckpts) < 2:
        raise CheckpointError("stochastic weight averaging needs >= 2 checkpoints")
    fps = {c.fingerprint for c in ckpts}
    if len(fps) != 1:
        raise CheckpointError(f"cannot average checkpoints with different fingerprints {fps}")
    keys = list(ckpts[0].params)
    for c in ckpts[1:]:
        if list(c.params) != keys:
            raise CheckpointError("checkpoints carry different parameter sets")
    averaged: dict[str, torch.Tensor] = {}
    for k in keys:
        tensors = [c.params[k] for c in ckpts]
        if not tensors[0].is_floating_point():
            averaged[k] = tensors[-1].clone()
            continue
        stacked = torch.stack([t.to(torch.float64) for t in tensors])
        averaged[k] = stacked.mean(dim=0).to(tensors[0].dtype)
    return Checkpoint(params=averaged, iteration=max(c.iteration for c in ckpts),
                      fingerprint=ckpts[0].fingerprint, phase="swa",
                      arch=ckpts[0].arch)


def recompute_norm_stats(model: nn.Module, dataset: Sequence[ShadowSample],
                         batch_size: int = 8) -> None:
    """One cumulative-average pass over the training set to refresh
    normalization buffers after weight averaging.

    Restoration-side buffers are left at their pretrained values (they stay
    frozen during fine-tuning, see JointModel.train).
    """
    skip: set[int] = set()
    if isinstance(model, JointModel) and model.uses_restoration:
        skip = {id(m) for m in model.restoration.modules()
                if isinstance(m, nn.BatchNorm2d)}
    bns = [m for m in model.modules()
           if isinstance(m, nn.BatchNorm2d) and id(m) not in skip]
    if not bns:
        return
    momenta = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    was_training = model.training
    model.train()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset[start:start + batch_size]
            imgs, _, _, _, _ = _to_tensor_batch(batch, False, False)
            model(imgs)
    for bn, m in zip(bns, momenta):
        bn.momentum = m
    model.train(was_training)


def build_model(ckpt: Checkpoint) -> JointModel:
    """Rebuild the joint model a checkpoint was saved from and load it."""
    if ckpt.arch is None:
        raise CheckpointError("checkpoint sidecar lacks the architecture record")
    arch = ArchConfig.from_dict(ckpt.arch)
    expected = arch.fingerprint("joint" if ckpt.phase in ("finetune", "swa") else "restoration")
    if ckpt.fingerprint != expected:
        raise CheckpointError(f"checkpoint fingerprint {ckpt.fingerprint} does not match "
                              f"its own architecture record {expected}")
    if ckpt.phase == "pretrain":
        raise CheckpointError("pretraining checkpoints hold only the restoration "
                              "network; fine-tune before evaluation")
    model = JointModel(arch)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model
