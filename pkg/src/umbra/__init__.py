"""Shadow detection trained alongside shadow removal.

A fine-context-aware detector whose training is enhanced by features from an
auxiliary restoration network, with distraction-aware deep supervision,
balanced-error-rate evaluation, a residual baseline, and receptive-field
analysis — exercised end to end on procedurally generated shadow triplets.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig, FeatureTap, StageBackbone
from .detector import FCDConfig, ScaleOutputs, ShadowDetector
from .evaluation import BERReport, compute_ber, compute_rmse
from .losses import LossWeights, detection_loss, restoration_loss, shadow_loss, weighted_bce
from .restoration import CFLConfig, FeatureBridge, RestorationUNet, UNetConfig, residual_predict
from .samples import DatasetManifest, ShadowSample, load_manifest, load_sample, resize_sample
from .synth import GenConfig, generate_dataset, generate_triplet
from .training import ArchConfig, Checkpoint, TrainConfig, finetune_r2d, pretrain_restoration, swa_average

__all__ = [
    "ArchConfig", "BackboneConfig", "BERReport", "CFLConfig", "Checkpoint",
    "DatasetManifest", "FCDConfig", "FeatureBridge", "FeatureTap", "GenConfig",
    "LossWeights", "RestorationUNet", "ScaleOutputs", "ShadowDetector",
    "ShadowSample", "StageBackbone", "TrainConfig", "UNetConfig", "compute_ber", "compute_rmse",
    "detection_loss", "finetune_r2d", "generate_dataset", "generate_triplet",
    "load_manifest", "load_sample", "pretrain_restoration", "residual_predict",
    "resize_sample", "restoration_loss", "shadow_loss", "swa_average",
    "weighted_bce",
]
