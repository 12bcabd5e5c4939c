import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from umbra.errors import GenerationError
from umbra.samples import load_manifest, load_split
from umbra.synth import GenConfig, generate_dataset, generate_triplet, heuristic_detector


def test_fixed_seed_bit_identical():
    cfg = GenConfig(side=64, seed=3)
    a = generate_triplet(cfg, np.random.default_rng(5))
    b = generate_triplet(cfg, np.random.default_rng(5))
    assert (a.image == b.image).all()
    assert (a.mask == b.mask).all()
    assert (a.clean == b.clean).all()


def test_no_attenuation_means_zero_residual():
    cfg = GenConfig(side=64, attenuation_range=(1.0, 1.0), confounder_prob=0.0)
    s = generate_triplet(cfg, np.random.default_rng(0))
    assert np.allclose(s.image, s.clean, atol=1e-7)


def test_mask_area_fraction_within_range():
    cfg = GenConfig(side=96)
    f_lo, f_hi = cfg.blob_area_frac_range
    for seed in range(6):
        s = generate_triplet(cfg, np.random.default_rng(seed))
        frac = s.mask.sum() / s.mask.size
        assert f_lo <= frac <= f_hi


def test_shadows_only_darken_and_match_outside_support():
    cfg = GenConfig(side=96, confounder_prob=1.0)
    for seed in range(4):
        s = generate_triplet(cfg, np.random.default_rng(seed))
        assert (s.image <= s.clean + 1e-6).all()
        support = gaussian_filter(s.mask.astype(np.float32),
                                  cfg.edge_blur_sigma_range[1]) > 0
        outside = ~support
        assert np.array_equal(s.image[outside], s.clean[outside])


def test_infeasible_area_constraint_raises():
    cfg = GenConfig(side=64, blob_area_frac_range=(0.2, 0.2000001),
                    blob_count_range=(1, 1))
    with pytest.raises(GenerationError):
        generate_triplet(cfg, np.random.default_rng(0))


def test_heuristic_empty_on_identical_images():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    assert heuristic_detector(img, img).sum() == 0


def test_heuristic_matches_mask_away_from_boundary():
    cfg = GenConfig(side=96, attenuation_range=(0.5, 0.5),
                    edge_blur_sigma_range=(0.05, 0.05), confounder_prob=0.0)
    s = generate_triplet(cfg, np.random.default_rng(2))
    pred = heuristic_detector(s.image, s.clean)
    # compare away from a 1-px band around the mask boundary
    m = s.mask.astype(bool)
    eroded = m & np.roll(m, 1, 0) & np.roll(m, -1, 0) & np.roll(m, 1, 1) & np.roll(m, -1, 1)
    dilated = m | np.roll(m, 1, 0) | np.roll(m, -1, 0) | np.roll(m, 1, 1) | np.roll(m, -1, 1)
    assert pred[eroded].all()
    assert not pred[~dilated].any()


def test_confounder_not_detected_by_heuristic():
    cfg = GenConfig(side=96, confounder_prob=1.0)
    s = generate_triplet(cfg, np.random.default_rng(1))
    pred = heuristic_detector(s.image, s.clean)
    same = np.isclose(s.image, s.clean, atol=1e-7).all(axis=2)
    assert not pred[same].any()


def test_dataset_generation_and_prevalence_reproducible(tmp_path):
    cfg = GenConfig(side=64, n_samples=5, seed=21)
    m1 = generate_dataset(cfg, tmp_path / "a", split="train")
    m2 = generate_dataset(cfg, tmp_path / "b", split="train")
    assert len(m1) == len(m2) == 5
    s1 = load_split(load_manifest(tmp_path / "a", "train"))
    s2 = load_split(load_manifest(tmp_path / "b", "train"))
    assert sum(int(s.mask.sum()) for s in s1) == sum(int(s.mask.sum()) for s in s2)
    for a, b in zip(s1, s2):
        assert (a.image == b.image).all()
        a.validate()
        assert a.clean is not None and a.fp_map is not None


def test_dataset_invariants_after_png_roundtrip(tmp_path):
    cfg = GenConfig(side=64, n_samples=3, seed=9, confounder_prob=1.0)
    manifest = generate_dataset(cfg, tmp_path, split="test")
    for s in load_split(manifest):
        assert (s.image <= s.clean + 1e-6).all()
        assert int((s.fp_map & s.mask).sum()) == 0
        assert int((s.fn_map & (1 - s.mask)).sum()) == 0
