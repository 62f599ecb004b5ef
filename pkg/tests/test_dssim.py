import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgemap import dssim
from forgemap.dssim import DssimParams
from forgemap.errors import ForgemapError, ShapeError


def test_identical_inputs_give_ssim_one():
    x = np.random.default_rng(0).random((20, 20))
    assert np.all(dssim.ssim_map(x, x) == 1.0)
    assert np.all(dssim.dssim_map(x, x) == 0.0)


def test_constant_shift_reduces_to_luminance_factor():
    # zero-variance windows: SSIM = (2*mx*my + C1) / (mx^2 + my^2 + C1)
    p = DssimParams()
    x = np.full((12, 12), 0.5)
    y = np.full((12, 12), 0.6)
    expected = (2 * 0.5 * 0.6 + p.c1) / (0.5 ** 2 + 0.6 ** 2 + p.c1)
    got = dssim.ssim_map(x, y, p)
    np.testing.assert_allclose(got, expected, atol=1e-12)
    naive = dssim.ssim_map_naive(x, y, p)
    np.testing.assert_allclose(got, naive, atol=1e-12)


def test_matches_naive_oracle_on_random_pairs():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(25):
        x = rng.random((16, 16))
        y = rng.random((16, 16))
        diff = np.abs(dssim.ssim_map(x, y) - dssim.ssim_map_naive(x, y))
        worst = max(worst, float(diff.max()))
    assert worst < 1e-6


def test_dssim_is_half_one_minus_ssim():
    rng = np.random.default_rng(4)
    x = rng.random((16, 16))
    y = rng.random((16, 16))
    s = dssim.ssim_map(x, y)
    d = dssim.dssim_map(x, y)
    np.testing.assert_allclose(d, np.clip((1 - s) / 2, 0, 1).astype(np.float32),
                               atol=1e-7)


def test_normalization_endpoint():
    # SSIM = -1 maps to normalized DSSIM exactly 1
    assert np.clip((1 - (-1.0)) / 2, 0, 1) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((10, 10))
    y = rng.random((10, 10))
    a = dssim.ssim_map(x, y)
    b = dssim.ssim_map(y, x)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= -1.0 - 1e-9 and a.max() <= 1.0 + 1e-9
    d = dssim.dssim_map(x, y)
    assert d.min() >= 0.0 and d.max() <= 1.0


def test_locality_of_window():
    rng = np.random.default_rng(5)
    x = rng.random((24, 24))
    y = x.copy()
    y[10:14, 10:14] += 0.2  # perturb a patch
    y = np.clip(y, 0, 1)
    d = dssim.dssim_map(x, y)
    r = DssimParams().window // 2
    outside = np.ones_like(d, dtype=bool)
    outside[10 - r:14 + r, 10 - r:14 + r] = False
    assert np.all(d[outside] == 0.0)
    assert d.max() > 0.0


def test_gt_map_real_sample_is_black():
    real = np.random.default_rng(6).random((3, 16, 16)).astype(np.float32)
    m = dssim.gt_map_for_sample(real, None)
    assert m.shape == (16, 16)
    assert np.all(m == 0.0)


def test_gt_map_identical_fake_is_black():
    real = np.random.default_rng(7).random((3, 16, 16)).astype(np.float32)
    assert np.all(dssim.gt_map_for_sample(real, real.copy()) == 0.0)


def test_gt_map_misaligned_raises():
    rng = np.random.default_rng(8)
    with pytest.raises(ShapeError):
        dssim.gt_map_for_sample(rng.random((3, 16, 16)), rng.random((3, 16, 18)))


def test_invalid_params_rejected():
    with pytest.raises(ForgemapError):
        DssimParams(window=4)
    with pytest.raises(ForgemapError):
        DssimParams(window=1)
    with pytest.raises(ForgemapError):
        DssimParams(c1=0.0)


def test_out_of_range_values_rejected():
    x = np.full((10, 10), 1.5)
    with pytest.raises(ForgemapError):
        dssim.ssim_map(x, x)


def test_luminance_weights():
    img = np.zeros((3, 4, 4))
    img[0] = 1.0
    np.testing.assert_allclose(dssim.luminance(img), 0.299)
