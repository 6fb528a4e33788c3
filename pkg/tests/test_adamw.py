"""AdamW against a scalar hand computation of the published recurrence."""

import numpy as np
import pytest

from dualipw.numkit.adamw import AdamW, AdamWConfig, OptimizerError


def scalar_adamw_oracle(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Step-by-step scalar recurrence, written independently."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p - lr * wd * p
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_zero_gradients_leave_params_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    opt = AdamW(params, AdamWConfig(lr=0.1, weight_decay=0.0))
    for _ in range(5):
        opt.step({"w": np.zeros(3)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])


def test_single_step_matches_scalar_recurrence():
    lr = 0.01
    g = 0.37
    params = {"w": np.array([1.5])}
    AdamW(params, AdamWConfig(lr=lr)).step({"w": np.array([g])})
    expected = scalar_adamw_oracle(1.5, [g], lr)
    assert params["w"][0] == pytest.approx(expected, abs=1e-15)
    # first step is a sign-like move of size about lr
    assert params["w"][0] == pytest.approx(1.5 - lr * g / (abs(g) + 1e-8), rel=1e-6)


def test_many_steps_match_scalar_recurrence_with_decay():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=20)
    params = {"w": np.array([0.8])}
    opt = AdamW(params, AdamWConfig(lr=0.05, weight_decay=0.01))
    for g in grads:
        opt.step({"w": np.array([g])})
    expected = scalar_adamw_oracle(0.8, grads, lr=0.05, wd=0.01)
    assert params["w"][0] == pytest.approx(expected, abs=1e-12)


def test_identical_params_stay_identical():
    params = {"a": np.array([0.3, 0.3]), "b": np.array([0.3])}
    opt = AdamW(params, AdamWConfig(lr=0.02, weight_decay=0.005))
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = rng.normal()
        opt.step({"a": np.array([g, g]), "b": np.array([g])})
    assert params["a"][0] == params["a"][1] == params["b"][0]


def test_nan_gradient_raises_with_param_name():
    opt = AdamW({"w": np.ones(2)}, AdamWConfig(lr=0.1))
    with pytest.raises(OptimizerError, match="w"):
        opt.step({"w": np.array([1.0, np.nan])})


def test_missing_gradient_skips_parameter():
    params = {"w": np.ones(2), "frozen": np.ones(2)}
    opt = AdamW(params, AdamWConfig(lr=0.1))
    opt.step({"w": np.ones(2)})
    np.testing.assert_array_equal(params["frozen"], np.ones(2))
    assert not np.array_equal(params["w"], np.ones(2))


def test_config_validation():
    with pytest.raises(ValueError):
        AdamWConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdamWConfig(lr=0.1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamWConfig(lr=0.1, weight_decay=-0.1)
