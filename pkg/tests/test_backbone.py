import pytest
import torch

from umbra.backbone import BackboneConfig, StageBackbone, TAP_STRIDES
from umbra.errors import ConfigError, ShapeError

torch.manual_seed(0)


def test_default_tap_shapes_at_160():
    net = StageBackbone()
    taps = net(torch.rand(1, 3, 160, 160))
    got = [(t.tensor.shape[1], t.tensor.shape[2], t.tensor.shape[3]) for t in taps]
    assert got == [(16, 80, 80), (32, 40, 40), (64, 20, 20), (128, 10, 10), (256, 5, 5)]
    assert [t.stride for t in taps] == list(TAP_STRIDES)


def test_l5_shape_at_320():
    net = StageBackbone()
    taps = net(torch.rand(1, 3, 320, 320))
    assert tuple(taps[-1].tensor.shape) == (1, 256, 10, 10)


def test_strides_exact_for_any_valid_side():
    net = StageBackbone(BackboneConfig(channels=(4, 4, 8, 8, 8)))
    net.eval()  # side 32 leaves L5 at 1×1, too small for batch statistics
    for side in (32, 64, 96):
        taps = net(torch.rand(1, 3, side, side))
        for t in taps:
            assert side // t.tensor.shape[-1] == t.stride


def test_zero_input_finite_outputs():
    net = StageBackbone(BackboneConfig(channels=(4, 4, 8, 8, 8)))
    net.eval()
    taps = net(torch.zeros(1, 3, 64, 64))
    for t in taps:
        assert torch.isfinite(t.tensor).all()


def test_invalid_side_raises():
    net = StageBackbone(BackboneConfig(channels=(4, 4, 8, 8, 8)))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 150, 150))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 64, 96))


def test_invalid_config_raises():
    with pytest.raises(ConfigError):
        StageBackbone(BackboneConfig(channels=(4, 4)))


def test_gradient_connectivity_to_input():
    net = StageBackbone(BackboneConfig(channels=(4, 4, 8, 8, 8)))
    x = torch.rand(1, 3, 64, 64, requires_grad=True)
    taps = net(x)
    taps[-1].tensor.sum().backward()
    assert x.grad.abs().sum() > 0


def test_frozen_backbone_has_no_trainable_params():
    net = StageBackbone(BackboneConfig(channels=(4, 4, 8, 8, 8), trainable=False))
    assert all(not p.requires_grad for p in net.parameters())
