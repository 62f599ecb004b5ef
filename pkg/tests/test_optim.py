import math

import numpy as np
import pytest

from forgemap.errors import NonFiniteError
from forgemap.optim import adamw_init, adamw_step, cosine_lr


def _single_param(value=1.0):
    return {"w": np.array([value], dtype=np.float32)}


def test_zero_grad_zero_decay_is_fixed_point():
    params = _single_param(0.7)
    state = adamw_init(params, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        adamw_step(state, params, {"w": np.zeros(1, np.float32)})
    assert params["w"][0] == pytest.approx(0.7, abs=0.0)
    assert state.step == 3


def test_zero_grad_decay_only_multiplies():
    lr, wd = 0.1, 0.5
    params = _single_param(1.0)
    state = adamw_init(params, lr=lr, weight_decay=wd)
    adamw_step(state, params, {"w": np.zeros(1, np.float32)})
    assert params["w"][0] == pytest.approx(1.0 * (1 - lr * wd), rel=1e-6)


def test_single_step_unit_gradient_update_is_minus_lr():
    # m_hat = v_hat = 1 after one step with g=1, so the update is
    # -lr / (1 + eps), i.e. -lr to within eps.
    lr = 0.01
    params = _single_param(0.0)
    state = adamw_init(params, lr=lr, weight_decay=0.0)
    adamw_step(state, params, {"w": np.ones(1, np.float32)})
    expected = -lr * 1.0 / (1.0 + state.eps)
    assert params["w"][0] == pytest.approx(expected, rel=1e-6)
    assert params["w"][0] == pytest.approx(-lr, rel=1e-5)


def test_non_finite_gradient_rejected():
    params = _single_param()
    state = adamw_init(params, lr=0.1)
    with pytest.raises(NonFiniteError):
        adamw_step(state, params, {"w": np.array([np.nan], np.float32)})


def test_step_counter_and_bias_correction_sequence():
    # two steps with constant gradient match the hand-rolled recurrence
    g = 0.5
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    params = _single_param(1.0)
    state = adamw_init(params, lr=lr)
    m = v = 0.0
    w = 1.0
    for step in range(1, 3):
        adamw_step(state, params, {"w": np.full(1, g, np.float32)})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** step)
        vh = v / (1 - b2 ** step)
        w -= lr * mh / (math.sqrt(vh) + eps)
    assert params["w"][0] == pytest.approx(w, rel=1e-5)


def test_cosine_boundaries_and_midpoint():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3, rel=1e-12)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)


def test_cosine_monotone_non_increasing():
    values = [cosine_lr(s, 200, 1.0, 0.01) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_step_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 1e-3, 1e-5)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3, 1e-5)
