import numpy as np
import pytest

from vlpretrain.autograd import Tensor
from vlpretrain.errors import ConfigError
from vlpretrain.optim import Adam, adam_step


def _state(x):
    return np.array(x, dtype=float), np.zeros_like(np.asarray(x, dtype=float)), np.zeros_like(np.asarray(x, dtype=float))


def test_zero_gradient_leaves_params():
    p, m, v = _state([1.0, -2.0])
    adam_step(p, np.zeros(2), m, v, 1, 0.1)
    assert np.array_equal(p, [1.0, -2.0])


def test_first_step_is_about_lr():
    p, m, v = _state([0.0])
    adam_step(p, np.ones(1), m, v, 1, 0.1)
    assert abs(p[0] + 0.1) < 1e-6


def test_quadratic_converges():
    p, m, v = _state([1.0])
    for t in range(1, 101):
        adam_step(p, 2 * p, m, v, t, 0.05)
    assert abs(p[0]) < 0.05


def test_matches_hand_recurrence(rng):
    g = rng.standard_normal((5, 3))
    p, m, v = _state(rng.standard_normal(3))
    ref = p.copy()
    rm, rv = np.zeros(3), np.zeros(3)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    for t in range(1, 6):
        adam_step(p, g[t - 1], m, v, t, lr, b1, b2, eps)
        rm = b1 * rm + (1 - b1) * g[t - 1]
        rv = b2 * rv + (1 - b2) * g[t - 1] ** 2
        ref = ref - lr * (rm / (1 - b1**t)) / (np.sqrt(rv / (1 - b2**t)) + eps)
    assert np.allclose(p, ref, rtol=0, atol=1e-15)


def test_errors():
    p, m, v = _state([1.0])
    with pytest.raises(ConfigError):
        adam_step(p, np.ones(1), m, v, 1, 0.0)
    with pytest.raises(ConfigError):
        adam_step(p, np.ones(1), m, v, 0, 0.1)


def test_adam_skips_params_without_grad():
    a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad = np.ones(1)
    opt.step()
    assert b.data[0] == 2.0 and a.data[0] < 1.0
