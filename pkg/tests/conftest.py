import numpy as np
import pytest
import torch

from umbra.backbone import BackboneConfig
from umbra.detector import FCDConfig
from umbra.restoration import UNetConfig
from umbra.synth import GenConfig, generate_triplet
from umbra.training import ArchConfig

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_gen_cfg():
    return GenConfig(side=64, n_samples=8, seed=11)


@pytest.fixture(scope="session")
def tiny_samples(tiny_gen_cfg):
    return [generate_triplet(tiny_gen_cfg, np.random.default_rng([11, i]), f"s{i:03d}")
            for i in range(8)]


def tiny_arch(mode="bb_ccd_fcd", side=64):
    return ArchConfig(
        side=side, mode=mode,
        backbone=BackboneConfig(channels=(4, 8, 8, 16, 16)),
        fcd=FCDConfig(depth=2, growth_px=8, channels=8),
        ccd_width=8,
        unet=UNetConfig(width_factor=0.125),
    )


@pytest.fixture
def small_arch():
    return tiny_arch()
