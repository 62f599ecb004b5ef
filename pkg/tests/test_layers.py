import numpy as np
import pytest

from forgemap import gradcheck, layers
from forgemap.errors import NonFiniteError, ShapeError


def test_conv_identity_1x1():
    spec = layers.conv2d(1, 1, kernel=1, stride=1, padding=0)
    x = np.random.default_rng(0).random((2, 1, 5, 5)).astype(np.float32)
    params = {"weight": np.ones((1, 1, 1, 1), np.float32),
              "bias": np.zeros(1, np.float32)}
    assert np.array_equal(layers.forward(spec, x, params), x)


def test_conv_2x2_allones_sums_window():
    spec = layers.conv2d(1, 1, kernel=2, stride=1, padding=0)
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2)
    params = {"weight": np.ones((1, 1, 2, 2), np.float32),
              "bias": np.zeros(1, np.float32)}
    y = layers.forward(spec, x, params)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 10.0


def test_gap_constant_per_channel():
    spec = layers.global_average_pool()
    c = 4.0
    x = np.full((1, 3, 6, 6), c, np.float32)
    y = layers.forward(spec, x)
    assert y.shape == (1, 3)
    assert np.all(y == c)


def test_silu_gradient_at_zero():
    spec = layers.activation("silu")
    x = np.zeros((1, 1, 1, 1), np.float64)
    gx, _ = layers.backward(spec, x, {}, np.ones((1, 1, 1, 1)))
    assert gx[0, 0, 0, 0] == pytest.approx(0.5, abs=1e-12)


def test_linear_weight_grad_is_input_outer_product():
    # loss = sum of outputs => dW[j, i] = sum_n x[n, i]
    spec = layers.linear(3, 2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    params = {"weight": rng.standard_normal((2, 3)),
              "bias": np.zeros(2)}
    gy = np.ones((4, 2))
    _, gp = layers.backward(spec, x, params, gy)
    expected = np.tile(x.sum(axis=0), (2, 1))
    np.testing.assert_allclose(gp["weight"], expected, rtol=1e-12)
    fd = gradcheck.numerical_grad(
        lambda: float(layers.forward(spec, x, params).sum()), params["weight"])
    np.testing.assert_allclose(gp["weight"], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kind", layers.KINDS)
def test_finite_difference_all_kinds(kind):
    err = gradcheck.check_kind(kind, trials=12, seed=2)
    assert err < 1e-4, f"{kind}: max rel err {err}"


@pytest.mark.parametrize("kind", layers.KINDS)
def test_shape_algebra_matches_forward(kind):
    rng = np.random.default_rng(5)
    for _ in range(10):
        spec, x, params = gradcheck.random_case(kind, rng)
        y = layers.forward(spec, x, params)
        assert tuple(np.shape(y)) == tuple(layers.output_shape(spec, x.shape))


def test_forward_backward_deterministic():
    rng = np.random.default_rng(9)
    spec, x, params = gradcheck.random_case("conv2d", rng)
    y1 = layers.forward(spec, x, params)
    y2 = layers.forward(spec, x, params)
    assert np.array_equal(y1, y2)
    g = np.ones_like(y1)
    gx1, gp1 = layers.backward(spec, x, params, g)
    gx2, gp2 = layers.backward(spec, x, params, g)
    assert np.array_equal(gx1, gx2)
    assert all(np.array_equal(gp1[k], gp2[k]) for k in gp1)


def test_ctx_cache_matches_recompute():
    rng = np.random.default_rng(10)
    for kind in ("conv2d", "group-normalization", "silu", "sigmoid"):
        spec, x, params = gradcheck.random_case(kind, rng)
        ctx = {}
        y = layers.forward(spec, x, params, ctx=ctx)
        g = rng.standard_normal(y.shape)
        gx_a, gp_a = layers.backward(spec, x, params, g, ctx=ctx)
        gx_b, gp_b = layers.backward(spec, x, params, g)
        np.testing.assert_allclose(gx_a, gx_b, rtol=1e-6, atol=1e-7)
        for k in gp_a:
            np.testing.assert_allclose(gp_a[k], gp_b[k], rtol=1e-6, atol=1e-7)


def test_shape_mismatch_raises():
    spec = layers.conv2d(3, 4)
    x = np.zeros((1, 2, 8, 8), np.float32)  # wrong channel count
    with pytest.raises(ShapeError):
        layers.forward(spec, x, layers.init_params(spec, np.random.default_rng(0)))


def test_grad_out_shape_mismatch_raises():
    spec = layers.linear(3, 2)
    params = layers.init_params(spec, np.random.default_rng(0))
    x = np.zeros((4, 3), np.float32)
    with pytest.raises(ShapeError):
        layers.backward(spec, x, params, np.zeros((4, 3), np.float32))


def test_non_finite_output_raises():
    spec = layers.linear(2, 2)
    params = {"weight": np.full((2, 2), np.inf, np.float32),
              "bias": np.zeros(2, np.float32)}
    with pytest.raises(NonFiniteError):
        layers.forward(spec, np.ones((1, 2), np.float32), params)


def test_invalid_spec_rejected():
    with pytest.raises(ShapeError):
        layers.LayerSpec("not-a-kind")
    with pytest.raises(ShapeError):
        layers.group_norm(10, groups=4)  # 10 % 4 != 0
    with pytest.raises(ShapeError):
        layers.conv2d(0, 4)
