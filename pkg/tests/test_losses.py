import math

import numpy as np
import pytest
import torch

from umbra.detector import ScaleOutputs
from umbra.losses import (LossWeights, detection_loss, distraction_loss,
                          restoration_loss, shadow_loss, total_loss, weighted_bce)

torch.manual_seed(0)


def _rand_maps(shape=(8, 8), seed=0, binary_frac=0.5):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(0.05, 0.95, shape)).double()
    y = torch.from_numpy((rng.random(shape) > binary_frac).astype(np.float64))
    fpd = ((torch.from_numpy(rng.random(shape)) > 0.7).double() * (1 - y))
    fnd = ((torch.from_numpy(rng.random(shape)) > 0.7).double() * y)
    return x, y, fpd, fnd


def central_difference_grad(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_grad(fn, x, rel_tol=1e-4):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = central_difference_grad(fn, x.detach().clone())
    denom = numeric.abs().max().clamp_min(1e-8)
    assert float((analytic - numeric).abs().max() / denom) < rel_tol


def test_weighted_bce_hand_case():
    x = torch.tensor([0.5, 0.5], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    expected = -math.log(0.5) / 2
    assert abs(weighted_bce(x, y).item() - expected) < 1e-12


def test_weighted_bce_perfect_prediction_is_tiny():
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    assert weighted_bce(y.clone(), y).item() <= 1e-6


def test_weighted_bce_degenerate_class_fallback():
    x = torch.full((6,), 0.7, dtype=torch.float64)
    y = torch.ones(6, dtype=torch.float64)
    plain_bce = -(torch.log(x)).mean().item()
    assert abs(weighted_bce(x, y).item() - plain_bce / 2) < 1e-12


def test_weighted_bce_errors():
    with pytest.raises(ValueError):
        weighted_bce(torch.rand(3), torch.zeros(4))
    with pytest.raises(ValueError):
        weighted_bce(torch.rand(3), torch.tensor([0.0, 0.5, 1.0]))


def test_weighted_bce_flip_invariance():
    x, y, _, _ = _rand_maps(seed=4)
    assert torch.isclose(weighted_bce(x, y), weighted_bce(x.flip(-1), y.flip(-1)))


def test_weighted_bce_matches_pixel_oracle():
    x, y, _, _ = _rand_maps(seed=5)
    n_p = y.sum().item()
    n_n = y.numel() - n_p
    a, b = n_n / y.numel(), n_p / y.numel()
    acc = 0.0
    for xi, yi in zip(x.reshape(-1).tolist(), y.reshape(-1).tolist()):
        acc -= a * yi * math.log(xi) + b * (1 - yi) * math.log(1 - xi)
    assert abs(weighted_bce(x, y).item() - acc / y.numel()) < 1e-10


def test_distraction_loss_zero_when_masks_empty():
    x, y, _, _ = _rand_maps(seed=6)
    z = torch.zeros_like(y)
    assert distraction_loss(x, y, z, z).item() == 0.0


def test_distraction_loss_saturated_masks_equal_bce():
    x, y, _, _ = _rand_maps(seed=7)
    assert torch.isclose(distraction_loss(x, y, 1 - y, y), weighted_bce(x, y))


def test_distraction_loss_matches_pixel_oracle():
    x, y, fpd, fnd = _rand_maps(seed=8)
    n_p = y.sum().item()
    n_n = y.numel() - n_p
    a, b = n_n / y.numel(), n_p / y.numel()
    acc = 0.0
    for xi, yi, pi, ni in zip(x.reshape(-1).tolist(), y.reshape(-1).tolist(),
                              fpd.reshape(-1).tolist(), fnd.reshape(-1).tolist()):
        acc -= a * ni * yi * math.log(xi) + b * pi * (1 - yi) * math.log(1 - xi)
    assert abs(distraction_loss(x, y, fpd, fnd).item() - acc / y.numel()) < 1e-10


def test_shadow_loss_reduces_to_bce_without_distraction():
    x, y, _, _ = _rand_maps(seed=9)
    z = torch.zeros_like(y)
    assert torch.isclose(shadow_loss(x, y, z, z), weighted_bce(x, y))
    assert torch.isclose(shadow_loss(x, y), weighted_bce(x, y))


def test_shadow_loss_scalar_composition():
    x, y, fpd, fnd = _rand_maps(seed=10)
    s = weighted_bce(x, y)
    d = distraction_loss(x, y, fpd, fnd)
    assert torch.isclose(shadow_loss(x, y, fpd, fnd), s + s * d)
    assert shadow_loss(x, y, fpd, fnd) >= s  # d >= 0 always


def test_shadow_loss_pixel_composition_runs():
    x, y, fpd, fnd = _rand_maps(seed=11)
    v = shadow_loss(x, y, fpd, fnd, composition="pixel")
    assert v.item() > 0
    with pytest.raises(ValueError):
        shadow_loss(x, y, fpd, fnd, composition="bogus")


def _mock_outputs(n_scales, seed=0, shape=(6, 6), with_ds=True):
    rng = np.random.default_rng(seed)
    out = ScaleOutputs()
    for _ in range(n_scales):
        out.side_preds.append(torch.from_numpy(rng.uniform(0.05, 0.95, shape)).double())
        if with_ds:
            out.fp_preds.append(torch.from_numpy(rng.uniform(0.05, 0.95, shape)).double())
            out.fn_preds.append(torch.from_numpy(rng.uniform(0.05, 0.95, shape)).double())
        else:
            out.fp_preds.append(None)
            out.fn_preds.append(None)
    out.final_pred = torch.from_numpy(rng.uniform(0.05, 0.95, shape)).double()
    return out


def test_detection_loss_beta_gamma_zero_is_sum_of_shadow_terms():
    out = _mock_outputs(3, seed=12)
    _, y, fpd, fnd = _rand_maps(shape=(6, 6), seed=13)
    w = LossWeights(alpha=1.0, beta=0.0, gamma=0.0)
    got = detection_loss(out, y, fpd, fnd, w)
    expect = sum(shadow_loss(p, y, fpd, fnd) for p in out.side_preds)
    expect = expect + shadow_loss(out.final_pred, y, fpd, fnd)
    assert torch.isclose(got, expect)


def test_detection_loss_hand_assembled_single_scale():
    out = _mock_outputs(1, seed=14)
    _, y, fpd, fnd = _rand_maps(shape=(6, 6), seed=15)
    w = LossWeights()  # defaults 1, 2, 2
    got = detection_loss(out, y, fpd, fnd, w)
    expect = (shadow_loss(out.side_preds[0], y, fpd, fnd)
              + 2.0 * weighted_bce(out.fp_preds[0], fpd)
              + 2.0 * weighted_bce(out.fn_preds[0], fnd)
              + shadow_loss(out.final_pred, y, fpd, fnd))
    assert torch.isclose(got, expect)


def test_detection_loss_monotone_in_weights():
    out = _mock_outputs(2, seed=16)
    _, y, fpd, fnd = _rand_maps(shape=(6, 6), seed=17)
    base = detection_loss(out, y, fpd, fnd, LossWeights()).item()
    for kwargs in ({"alpha": 2.0}, {"beta": 3.0}, {"gamma": 3.0}):
        assert detection_loss(out, y, fpd, fnd, LossWeights(**kwargs)).item() >= base


def test_detection_loss_without_distraction_gt_drops_terms():
    out = _mock_outputs(2, seed=18)
    _, y, _, _ = _rand_maps(shape=(6, 6), seed=19)
    got = detection_loss(out, y, None, None, LossWeights())
    expect = sum(weighted_bce(p, y) for p in out.side_preds) + weighted_bce(out.final_pred, y)
    assert torch.isclose(got, expect)


def test_restoration_loss_identities_and_oracle():
    rng = np.random.default_rng(20)
    clean = torch.from_numpy(rng.random((3, 5, 5))).double()
    assert restoration_loss(clean, clean).item() == 0.0
    assert abs(restoration_loss(clean + 0.25, clean).item() - 0.25 ** 2) < 1e-12
    restored = torch.from_numpy(rng.random((3, 5, 5))).double()
    oracle = float(np.mean((restored.numpy() - clean.numpy()) ** 2))
    assert abs(restoration_loss(restored, clean).item() - oracle) < 1e-12
    with pytest.raises(ValueError):
        restoration_loss(restored, None)


def test_total_loss_is_sum():
    assert total_loss(torch.tensor(0.0), torch.tensor(0.0)).item() == 0.0
    assert total_loss(torch.tensor(1.5), torch.tensor(0.0)).item() == 1.5
    assert total_loss(torch.tensor(1.5), torch.tensor(0.25)).item() == 1.75


def test_all_losses_nonnegative():
    x, y, fpd, fnd = _rand_maps(seed=21)
    assert weighted_bce(x, y).item() >= 0
    assert distraction_loss(x, y, fpd, fnd).item() >= 0
    assert shadow_loss(x, y, fpd, fnd).item() >= 0


def test_raw_sum_reduction_variant():
    x, y, _, _ = _rand_maps(seed=22)
    assert torch.isclose(weighted_bce(x, y, reduction="sum"),
                         weighted_bce(x, y) * y.numel())


def test_gradients_match_central_differences():
    x, y, fpd, fnd = _rand_maps(seed=23)
    check_grad(lambda v: weighted_bce(v, y), x)
    check_grad(lambda v: distraction_loss(v, y, fpd, fnd), x)
    check_grad(lambda v: shadow_loss(v, y, fpd, fnd), x)
    clean = torch.from_numpy(np.random.default_rng(24).random((8, 8))).double()
    check_grad(lambda v: restoration_loss(v, clean), x)

    def det(v):
        out = ScaleOutputs()
        out.side_preds = [v]
        out.fp_preds = [v]
        out.fn_preds = [v]
        out.final_pred = v
        return detection_loss(out, y, fpd, fnd, LossWeights())

    check_grad(det, x)
