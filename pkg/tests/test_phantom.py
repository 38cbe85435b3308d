import numpy as np
import pytest

from gradreg.metrics import dice
from gradreg.phantom import (
    PhantomConfig,
    _sample_field_at,
    generate_phantom_pair,
    invert_field,
    load_case,
    random_smooth_field,
    save_case,
)
from gradreg.warp import warp_nearest


def mean_dice(a, b):
    labels = sorted(set(a.label_set()) | set(b.label_set()))
    return float(np.mean([dice(a, b, l) for l in labels]))


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(dims=(30, 32, 32))
    with pytest.raises(ValueError):
        PhantomConfig(deform_amplitude=-1)
    with pytest.raises(ValueError):
        PhantomConfig(deform_smoothness=0)


def test_random_field_amplitude_zero_is_identity():
    f = random_smooth_field(np.random.SeedSequence(0), (16, 16, 16), 0.0, 4.0)
    assert np.all(f.disp == 0.0)


def test_random_field_same_seed_identical():
    a = random_smooth_field(np.random.SeedSequence(4), (16, 16, 16), 2.0, 4.0)
    b = random_smooth_field(np.random.SeedSequence(4), (16, 16, 16), 2.0, 4.0)
    assert a.disp.tobytes() == b.disp.tobytes()


def test_random_field_max_magnitude_equals_amplitude():
    f = random_smooth_field(np.random.SeedSequence(1), (16, 16, 16), 2.5, 4.0)
    mag = np.sqrt((f.disp**2).sum(axis=0))
    assert mag.max() == pytest.approx(2.5, abs=1e-9)


def test_invert_field_residual_small():
    u = random_smooth_field(np.random.SeedSequence(2), (32, 32, 32), 3.0, 6.0)
    v = invert_field(u)
    residual = v.disp + _sample_field_at(u.disp, v.disp)
    assert np.abs(residual).max() < 1e-6


def test_zero_amplitude_shares_geometry():
    cfg = PhantomConfig(seed=3, deform_amplitude=0.0, noise_sigma=0.0)
    case = generate_phantom_pair(cfg)
    assert mean_dice(case.moving_mask, case.fixed_mask) == 1.0
    assert np.all(case.gt_field.disp == 0.0)


def test_default_config_is_misaligned_but_correctable():
    case = generate_phantom_pair(PhantomConfig(seed=0))
    before = mean_dice(case.moving_mask, case.fixed_mask)
    assert before < 1.0
    corrected = warp_nearest(case.moving_mask, case.gt_field)
    assert mean_dice(corrected, case.fixed_mask) >= 0.95


def test_same_seed_bit_identical_case():
    a = generate_phantom_pair(PhantomConfig(seed=7))
    b = generate_phantom_pair(PhantomConfig(seed=7))
    assert a.moving.data.tobytes() == b.moving.data.tobytes()
    assert a.fixed.data.tobytes() == b.fixed.data.tobytes()
    assert np.array_equal(a.moving_mask.labels, b.moving_mask.labels)
    assert a.gt_field.disp.tobytes() == b.gt_field.disp.tobytes()


def test_different_seeds_differ():
    a = generate_phantom_pair(PhantomConfig(seed=1))
    b = generate_phantom_pair(PhantomConfig(seed=2))
    assert a.moving.data.tobytes() != b.moving.data.tobytes()


def test_intensity_relationship_not_functional():
    # aligned geometry: the bias field must map one moving intensity to
    # several fixed intensities
    cfg = PhantomConfig(seed=5, deform_amplitude=0.0)
    case = generate_phantom_pair(cfg)
    moving = case.moving.data.ravel()
    fixed = case.fixed.data.ravel()
    m_bins = np.clip((16 * (moving - moving.min()) / np.ptp(moving)).astype(int), 0, 15)
    f_bins = np.clip((16 * (fixed - fixed.min()) / np.ptp(fixed)).astype(int), 0, 15)
    spread = [len(np.unique(f_bins[m_bins == mb])) for mb in np.unique(m_bins)]
    assert max(spread) >= 2
    assert sum(s >= 2 for s in spread) >= 2


def test_masks_consistent_with_geometry():
    case = generate_phantom_pair(PhantomConfig(seed=9))
    assert case.fixed_mask.dims == case.fixed.dims
    assert case.moving_mask.dims == case.moving.dims
    assert case.fixed_mask.label_set() == [1, 2, 3]
    # fixed volume is darker inside blobs than outside on average
    inside = case.fixed.data[case.fixed_mask.labels > 0].mean()
    outside = case.fixed.data[case.fixed_mask.labels == 0].mean()
    assert inside < outside


def test_case_directory_roundtrip(tmp_path):
    cfg = PhantomConfig(seed=4)
    case = generate_phantom_pair(cfg)
    save_case(case, cfg, tmp_path / "case_000")
    back = load_case(tmp_path / "case_000")
    # volumes round-trip through float32 payloads
    np.testing.assert_allclose(back.moving.data, case.moving.data, atol=1e-6)
    np.testing.assert_array_equal(back.moving_mask.labels, case.moving_mask.labels)
    np.testing.assert_array_equal(back.fixed_mask.labels, case.fixed_mask.labels)
    np.testing.assert_allclose(back.gt_field.disp, case.gt_field.disp, atol=1e-6)
    assert (tmp_path / "case_000" / "manifest.json").exists()
