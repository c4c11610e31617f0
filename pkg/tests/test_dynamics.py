import numpy as np
import pytest

from graphixs.core import Component, ComponentSet
from graphixs.dynamics import brownian_eps_at, brownian_perturb, mean_at_time, mean_at_time_batch, mean_at_time_vjp

from conftest import random_set


def test_static_component_does_not_move():
    c = Component(mu=np.array([1.0, 2, 3]))
    for t in (-3.0, 0.0, 7.5):
        np.testing.assert_array_equal(mean_at_time(c, t), c.mu)


def test_linear_term():
    c = Component(v=np.array([1.0, 0, 0]))
    np.testing.assert_allclose(mean_at_time(c, 2.0), [2, 0, 0])


def test_snap_term():
    c = Component(s=np.array([24.0, 0, 0]))
    np.testing.assert_allclose(mean_at_time(c, 1.0), [1, 0, 0])


def test_quartic_taylor_exact(rng):
    # p(t) = sum_k c_k (t - g)^k with the derivatives at g as parameters
    g = 0.3
    coef = rng.normal(size=(5, 3))
    c = Component(mu=coef[0], v=coef[1], a=2 * coef[2], j=6 * coef[3], s=24 * coef[4], g=g)
    for t in rng.uniform(-2, 2, 100):
        d = t - g
        ref = sum(coef[k] * d ** k for k in range(5))
        np.testing.assert_allclose(mean_at_time(c, t), ref, atol=1e-10)


def test_truncation_is_affine(rng):
    c = Component(mu=rng.normal(size=3), v=rng.normal(size=3), g=0.2)
    ts = np.linspace(0, 1, 21)
    p = np.array([mean_at_time(c, t) for t in ts])
    assert np.max(np.abs(p[2:] - 2 * p[1:-1] + p[:-2])) <= 1e-12


def test_batch_matches_scalar(rng):
    cs = random_set(rng, 6)
    out = mean_at_time_batch(cs, 0.7)
    for i, c in enumerate(cs):
        np.testing.assert_allclose(out[i], mean_at_time(c, 0.7), atol=1e-14)


def test_vjp_matches_finite_differences(rng):
    cs = random_set(rng, 4)
    t = 0.9
    w = rng.normal(size=(4, 3))
    grads = mean_at_time_vjp(cs, t, w)
    f = lambda s: float(np.sum(w * mean_at_time_batch(s, t)))
    for name in ("mu", "v", "a", "j", "s", "g"):
        arr = getattr(cs, name)
        for idx in np.ndindex(arr.shape):
            h = 1e-6
            p, m = cs.copy(), cs.copy()
            getattr(p, name)[idx] += h
            getattr(m, name)[idx] -= h
            fd = (f(p) - f(m)) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-6, abs=1e-9), (name, idx)


def test_brownian_zero_eps_is_identity(rng):
    x = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(brownian_perturb(x, 0.0, 0.1, rng), x)


def test_brownian_variance():
    rng = np.random.default_rng(5)
    out = brownian_perturb(np.zeros((100_000, 3)), 1.0, 0.1, rng)
    var = out.var(axis=0)
    np.testing.assert_allclose(var, 0.01, rtol=0.05)


def test_brownian_seeded():
    x = np.zeros((5, 3))
    a = brownian_perturb(x, 0.5, 1.0, np.random.default_rng(3))
    b = brownian_perturb(x, 0.5, 1.0, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_brownian_rejects_bad_args(rng):
    with pytest.raises(ValueError):
        brownian_perturb(np.zeros((1, 3)), -1.0, 1.0, rng)
    with pytest.raises(ValueError):
        brownian_perturb(np.zeros((1, 3)), 1.0, 0.0, rng)


def test_eps_schedule_linear_decay():
    assert brownian_eps_at(0.01, 0, 100) == 0.01
    assert brownian_eps_at(0.01, 79, 100) == 0.01
    assert brownian_eps_at(0.01, 90, 100) == pytest.approx(0.005)
    assert brownian_eps_at(0.01, 100, 100) == 0.0
