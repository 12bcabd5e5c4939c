import numpy as np
import pytest

from umbra.errors import ConfigError, IntegrityError, LoadError
from umbra.samples import (DatasetManifest, ManifestEntry, ShadowSample,
                           augment_flip, derive_distraction_gt, flip_sample,
                           load_manifest, load_sample, resize_sample,
                           save_image, save_manifest, save_mask)
from umbra.synth import GenConfig, _shadow_mask


def _write_entry(root, sid, size=(24, 24), with_clean=True, mask_size=None):
    rng = np.random.default_rng(hash(sid) % 2**31)
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    (root / "clean").mkdir(exist_ok=True)
    save_image(root / f"images/{sid}.png", rng.random((*size, 3)).astype(np.float32))
    mask = (rng.random(mask_size or size) > 0.5).astype(np.uint8)
    save_mask(root / f"masks/{sid}.png", mask)
    entry = ManifestEntry(id=sid, image=f"images/{sid}.png", mask=f"masks/{sid}.png")
    if with_clean:
        save_image(root / f"clean/{sid}.png", rng.random((*size, 3)).astype(np.float32))
        entry.clean = f"clean/{sid}.png"
    return entry


def test_load_triplet_has_clean(tmp_path):
    entry = _write_entry(tmp_path, "a", with_clean=True)
    s = load_sample(entry, tmp_path)
    assert s.clean is not None
    assert s.image.shape == (24, 24, 3)
    assert s.image.dtype == np.float32
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert set(np.unique(s.mask)) <= {0, 1}


def test_load_pair_has_no_clean(tmp_path):
    entry = _write_entry(tmp_path, "b", with_clean=False)
    s = load_sample(entry, tmp_path)
    assert s.clean is None and s.fp_map is None


def test_load_wrong_size_mask_is_integrity_error(tmp_path):
    entry = _write_entry(tmp_path, "c", size=(24, 24), mask_size=(16, 16))
    with pytest.raises(IntegrityError):
        load_sample(entry, tmp_path)


def test_load_missing_file_is_load_error(tmp_path):
    entry = ManifestEntry(id="x", image="images/x.png", mask="masks/x.png")
    with pytest.raises(LoadError):
        load_sample(entry, tmp_path)


def test_manifest_roundtrip_and_checks(tmp_path):
    entries = [_write_entry(tmp_path, f"s{i}") for i in range(3)]
    save_manifest(DatasetManifest(root=tmp_path, split="train", entries=entries))
    m = load_manifest(tmp_path, "train")
    assert [e.id for e in m.entries] == ["s0", "s1", "s2"]
    with pytest.raises(LoadError):
        load_manifest(tmp_path, "test")
    # duplicate ids rejected
    dup = entries + [entries[0]]
    save_manifest(DatasetManifest(root=tmp_path, split="dup", entries=dup))
    with pytest.raises(IntegrityError):
        load_manifest(tmp_path, "dup")


def _random_sample(size=(20, 28), seed=0, with_distraction=True):
    rng = np.random.default_rng(seed)
    mask = (rng.random(size) > 0.6).astype(np.uint8)
    fp = fn = None
    if with_distraction:
        fp = ((rng.random(size) > 0.8).astype(np.uint8) & (1 - mask)).astype(np.uint8)
        fn = ((rng.random(size) > 0.8).astype(np.uint8) & mask).astype(np.uint8)
    return ShadowSample(image=rng.random((*size, 3)).astype(np.float32), mask=mask,
                        clean=rng.random((*size, 3)).astype(np.float32),
                        fp_map=fp, fn_map=fn, id="r")


def test_resize_square_output_and_binary_mask():
    s = _random_sample(size=(48, 36))
    out = resize_sample(s, 32)
    assert out.image.shape == (32, 32, 3)
    assert out.mask.shape == (32, 32)
    assert set(np.unique(out.mask)) <= {0, 1}
    out.validate()


def test_resize_identity_when_same_side():
    s = _random_sample(size=(32, 32))
    out = resize_sample(s, 32)
    assert out.image is s.image and out.mask is s.mask


def test_resize_constant_mask_invariant():
    s = _random_sample(size=(40, 40))
    s.mask = np.ones((40, 40), dtype=np.uint8)
    s.fp_map = np.zeros((40, 40), dtype=np.uint8)
    s.fn_map = s.fn_map * 0 + 1
    out = resize_sample(s, 64)
    assert (out.mask == 1).all()


def test_resize_below_minimum_is_config_error():
    with pytest.raises(ConfigError):
        resize_sample(_random_sample(), 16)


def test_resize_roundtrip_mask_iou():
    # features >= 4 px survive down-up resize with IoU >= 0.9
    cfg = GenConfig(side=160, blob_area_frac_range=(0.1, 0.3))
    for seed in range(3):
        mask = _shadow_mask(cfg, np.random.default_rng(seed))
        s = ShadowSample(image=np.zeros((160, 160, 3), np.float32), mask=mask)
        down = resize_sample(s, 80)
        back = resize_sample(down, 160)
        inter = np.count_nonzero(back.mask & mask)
        union = np.count_nonzero(back.mask | mask)
        assert inter / union >= 0.9


def test_flip_is_involution_and_coordinate_oracle():
    s = _random_sample()
    flipped = flip_sample(s)
    h, w = s.mask.shape
    for _ in range(50):
        y, x = np.random.default_rng(1).integers(0, (h, w))
        assert flipped.mask[y, x] == s.mask[y, w - 1 - x]
    twice = flip_sample(flipped)
    assert (twice.image == s.image).all()
    assert (twice.mask == s.mask).all()
    assert (twice.fp_map == s.fp_map).all()


def test_augment_flip_deterministic_and_joint():
    s = _random_sample()
    outs = [augment_flip(s, np.random.default_rng(7)) for _ in range(2)]
    assert (outs[0].image == outs[1].image).all()
    # mask flipped iff image flipped
    for seed in range(8):
        out = augment_flip(s, np.random.default_rng(seed))
        img_flipped = not (out.image == s.image).all()
        mask_flipped = not (out.mask == s.mask).all()
        if img_flipped or mask_flipped:
            assert (out.image == s.image[:, ::-1]).all()
            assert (out.mask == s.mask[:, ::-1]).all()


def test_derive_distraction_perfect_prediction():
    gt = (np.random.default_rng(3).random((12, 12)) > 0.5).astype(np.uint8)
    fp, fn = derive_distraction_gt(gt.astype(np.float32), gt)
    assert fp.sum() == 0 and fn.sum() == 0


def test_derive_distraction_all_positive_pred():
    gt = np.zeros((8, 8), dtype=np.uint8)
    fp, fn = derive_distraction_gt(np.ones((8, 8), np.float32), gt)
    assert (fp == 1).all() and (fn == 0).all()


def test_derive_distraction_matches_set_difference_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred = rng.random((8, 8)).astype(np.float32)
        gt = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        fp, fn = derive_distraction_gt(pred, gt, threshold=0.5)
        for y in range(8):
            for x in range(8):
                p = 1 if pred[y, x] >= 0.5 else 0
                assert fp[y, x] == (1 if p == 1 and gt[y, x] == 0 else 0)
                assert fn[y, x] == (1 if p == 0 and gt[y, x] == 1 else 0)


def test_derive_distraction_shape_mismatch():
    with pytest.raises(IntegrityError):
        derive_distraction_gt(np.zeros((4, 4)), np.zeros((5, 5), dtype=np.uint8))


def test_distraction_invariants_hold_after_load_and_resize(tmp_path, tiny_samples):
    s = tiny_samples[0]
    for side in (64, 96):
        out = resize_sample(s, side)
        assert int((out.fp_map * out.mask).sum()) == 0
        assert int((out.fn_map * (1 - out.mask)).sum()) == 0


def test_resize_to_training_resolution():
    s = _random_sample(size=(480, 640), with_distraction=False)
    out = resize_sample(s, 320)
    assert out.image.shape == (320, 320, 3)
    assert out.mask.shape == (320, 320)
    assert set(np.unique(out.mask)) <= {0, 1}
