import math

import numpy as np
import pytest

from tsguide.errors import ParameterError, ShapeError
from tsguide.schedule import (
    build_linear_schedule,
    denoising_loss,
    forward_sample,
    one_step_denoise,
    posterior_mean,
    reverse_step,
)

# alpha_bar_100 for the default schedule, from a 40-digit mpmath product
ALPHA_BAR_100 = 0.005618761019373738


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(100, 1e-4, 0.1)


def test_beta_50(sched):
    assert sched.beta_at(50) == pytest.approx(1e-4 + 49 * 0.0999 / 99, rel=1e-14)
    assert sched.beta_at(50) == pytest.approx(0.0495455, abs=1e-7)


def test_alpha_bar_matches_product_oracle(sched):
    prod = 1.0
    for t in range(1, 101):
        prod *= 1.0 - (1e-4 + (t - 1) * (0.1 - 1e-4) / 99)
        assert sched.alpha_bar_at(t) == pytest.approx(prod, abs=1e-12)
    assert sched.alpha_bar_at(100) == pytest.approx(ALPHA_BAR_100, rel=1e-12)
    assert 0.004 < sched.alpha_bar_at(100) < 0.008


def test_constant_beta():
    s = build_linear_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25])


def test_invariants(sched):
    assert np.all(np.diff(sched.beta) >= 0)
    assert 0 < sched.beta[0] and sched.beta[-1] < 1
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))
    assert np.all(sched.sigma2 >= 0) and np.all(sched.sigma2 <= sched.beta + 1e-18)
    assert sched.sigma2_at(1) == 0.0


@pytest.mark.parametrize("args", [(1, 1e-4, 0.1), (100, 0.0, 0.1), (100, 0.2, 0.1), (100, 1e-4, 1.0), (2.5, 1e-4, 0.1)])
def test_invalid_schedule(args):
    with pytest.raises(ParameterError):
        build_linear_schedule(*args)


def test_schedule_is_immutable(sched):
    with pytest.raises(ValueError):
        sched.beta[0] = 1.0


def test_forward_sample_special_cases(sched):
    rng = np.random.default_rng(0)
    y = rng.standard_normal((8, 2))
    eps = rng.standard_normal((8, 2))
    np.testing.assert_array_equal(forward_sample(y, 30, np.zeros_like(y), sched), math.sqrt(sched.alpha_bar_at(30)) * y)
    np.testing.assert_allclose(
        forward_sample(np.zeros_like(y), 30, eps, sched), math.sqrt(1 - sched.alpha_bar_at(30)) * eps
    )
    with pytest.raises(ShapeError):
        forward_sample(y, 30, eps[:4], sched)
    with pytest.raises(ParameterError):
        forward_sample(y, 0, eps, sched)


def test_forward_sample_moments(sched):
    rng = np.random.default_rng(1)
    y = np.array([[3.0], [-2.0], [5.0]])
    t = 40
    eps = rng.standard_normal((100_000,) + y.shape)
    x = forward_sample(np.broadcast_to(y, eps.shape), t, eps, sched)
    ab = sched.alpha_bar_at(t)
    np.testing.assert_allclose(x.mean(axis=0), math.sqrt(ab) * y, rtol=0.02)
    np.testing.assert_allclose(x.var(axis=0), np.full_like(y, 1 - ab), rtol=0.02)


def test_posterior_mean(sched):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 1))
    np.testing.assert_allclose(posterior_mean(x, np.zeros_like(x), 10, sched), x / math.sqrt(sched.alpha_at(10)))
    tiny = build_linear_schedule(3, 1e-15, 1e-15)
    np.testing.assert_allclose(posterior_mean(x, rng.standard_normal(x.shape), 2, tiny), x, atol=1e-7)
    # independent re-derivation of the mean formula
    e = rng.standard_normal(x.shape)
    b, a, ab = sched.beta[59], 1 - sched.beta[59], np.prod(1 - sched.beta[:60])
    np.testing.assert_allclose(posterior_mean(x, e, 60, sched), (x - b / np.sqrt(1 - ab) * e) / np.sqrt(a), rtol=1e-13)


def test_reverse_step(sched):
    rng = np.random.default_rng(3)
    x, e = rng.standard_normal((2, 6, 1))
    np.testing.assert_array_equal(reverse_step(x, e, 20, np.zeros_like(x), sched), posterior_mean(x, e, 20, sched))
    z = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(reverse_step(x, e, 1, z, sched), posterior_mean(x, e, 1, sched))
    a1 = reverse_step(x, e, 50, np.zeros_like(x), sched)
    a2 = reverse_step(x, e, 50, np.zeros_like(x), sched)
    assert a1.tobytes() == a2.tobytes()


def test_reverse_step_variance(sched):
    rng = np.random.default_rng(4)
    x = np.array([[0.3], [-1.0]])
    e = np.array([[0.1], [0.4]])
    noise = rng.standard_normal((50_000,) + x.shape)
    draws = reverse_step(np.broadcast_to(x, noise.shape), np.broadcast_to(e, noise.shape), 70, noise, sched)
    np.testing.assert_allclose(draws.var(axis=0), np.full_like(x, sched.sigma2_at(70)), rtol=0.03)


def test_denoising_loss():
    rng = np.random.default_rng(5)
    eps = rng.standard_normal((7, 3))
    assert denoising_loss(eps, eps) == 0.0
    assert denoising_loss(eps + 1, eps) == pytest.approx(1.0)
    pred = rng.standard_normal((7, 3))
    brute = sum((pred[i, j] - eps[i, j]) ** 2 for i in range(7) for j in range(3)) / 21
    assert denoising_loss(pred, eps) == pytest.approx(brute, rel=1e-14)


@pytest.mark.parametrize("t", [1, 2, 37, 99, 100])
def test_one_step_denoise_inverts_forward(sched, t):
    rng = np.random.default_rng(t)
    y, eps = rng.standard_normal((2, 12, 2))
    x = forward_sample(y, t, eps, sched)
    np.testing.assert_allclose(one_step_denoise(x, eps, t, sched), y, atol=1e-12)
    ab = sched.alpha_bar_at(t)
    np.testing.assert_allclose(one_step_denoise(x, np.zeros_like(x), t, sched), x / np.sqrt(ab))
    e = rng.standard_normal(x.shape)
    np.testing.assert_allclose(one_step_denoise(x, e, t, sched), (x - np.sqrt(1 - ab) * e) / np.sqrt(ab), rtol=1e-13)


def test_batched_steps(sched):
    rng = np.random.default_rng(9)
    y, eps = rng.standard_normal((2, 3, 4, 1))
    t = np.array([1, 50, 100])
    batched = forward_sample(y, t, eps, sched)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], forward_sample(y[i], t[i], eps[i], sched))


@pytest.mark.parametrize("t_check", [10, 50, 100])
def test_marginal_consistency(sched, t_check):
    """Composing the one-step Gaussian transitions reproduces the closed-form marginal.

    10^4 chains, each a length-16 window whose entries share the same clean value.
    """
    rng = np.random.default_rng(10 + t_check)
    ab = sched.alpha_bar_at(t_check)
    y0 = 4.0 / np.sqrt(ab)
    x = np.full((10_000, 16), y0)
    for t in range(1, t_check + 1):
        b = sched.beta_at(t)
        x = np.sqrt(1 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    assert x.mean() == pytest.approx(np.sqrt(ab) * y0, rel=0.02)
    assert x.var() == pytest.approx(1 - ab, rel=0.02)
