"""DDPM noise schedule and the closed-form diffusion arithmetic.

Steps are 1-based: ``t = 1`` is the least noisy latent and ``t = T`` the
most noisy one. ``t = 0`` denotes clean data and is never passed to the
functions below. All arithmetic is done in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed forward-process parameters.

    Arrays are stored 0-based (``beta[t - 1]`` is β_t); use the accessors
    to index by diffusion step.
    """

    T: int
    beta_1: float
    beta_T: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma2):
            arr.setflags(write=False)

    def _idx(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"diffusion step out of range 1..{self.T}: {t}")
        return t - 1

    def beta_at(self, t):
        return self.beta[self._idx(t)]

    def alpha_at(self, t):
        return self.alpha[self._idx(t)]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._idx(t)]

    def sigma2_at(self, t):
        return self.sigma2[self._idx(t)]


def build_linear_schedule(T: int = 100, beta_1: float = 1e-4, beta_T: float = 0.1) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ParameterError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ParameterError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    T = int(T)
    steps = np.arange(T, dtype=np.float64)
    beta = beta_1 + steps * (beta_T - beta_1) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # alpha_bar_0 = 1, which makes the final reverse step (t = 1) noiseless
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T, float(beta_1), float(beta_T), beta, alpha, alpha_bar, sigma2)


def _check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch for {what}: {np.shape(a)} vs {np.shape(b)}")


def _per_sample(value, ndim):
    """Broadcast a scalar or per-batch-row coefficient against ``ndim``-d data."""
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape + (1,) * (ndim - value.ndim))


def forward_sample(y, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Draw x^t ~ q(x^t | y) with the caller's noise: sqrt(ab) y + sqrt(1 - ab) eps.

    ``t`` may be a scalar or one step per leading batch row.
    """
    _check_same_shape(y, eps, "y/eps")
    y = np.asarray(y, dtype=np.float64)
    ab = _per_sample(sched.alpha_bar_at(t), y.ndim)
    return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def posterior_mean(x_t, eps_pred, t, sched: NoiseSchedule) -> np.ndarray:
    _check_same_shape(x_t, eps_pred, "x_t/eps_pred")
    x_t = np.asarray(x_t, dtype=np.float64)
    b = _per_sample(sched.beta_at(t), x_t.ndim)
    a = _per_sample(sched.alpha_at(t), x_t.ndim)
    ab = _per_sample(sched.alpha_bar_at(t), x_t.ndim)
    return (x_t - b / np.sqrt(1.0 - ab) * np.asarray(eps_pred, dtype=np.float64)) / np.sqrt(a)


def reverse_step(x_t, eps_pred, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step x^{t-1} = mu_theta(x^t, t) + sigma_t * noise."""
    _check_same_shape(x_t, noise, "x_t/noise")
    mu = posterior_mean(x_t, eps_pred, t, sched)
    sigma = np.sqrt(_per_sample(sched.sigma2_at(t), mu.ndim))
    return mu + sigma * np.asarray(noise, dtype=np.float64)


def denoising_loss(eps_pred, eps) -> float:
    """Mean squared error over all elements."""
    _check_same_shape(eps_pred, eps, "eps_pred/eps")
    diff = np.asarray(eps_pred, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(np.mean(diff * diff))


def one_step_denoise(x_t, eps_pred, t, sched: NoiseSchedule) -> np.ndarray:
    """Estimate of the clean series from x^t by inverting the forward marginal."""
    _check_same_shape(x_t, eps_pred, "x_t/eps_pred")
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _per_sample(sched.alpha_bar_at(t), x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * np.asarray(eps_pred, dtype=np.float64)) / np.sqrt(ab)
