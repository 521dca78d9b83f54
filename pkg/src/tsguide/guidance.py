"""Observation self-guidance: condition an unconditional model on observed entries at sampling time.

The guidance distribution is built from the model's own one-step estimate
of the clean series, f(x^t) = (x^t - sqrt(1 - ab_t) eps(x^t, t)) / sqrt(ab_t):

* mean-square:  log p(y_obs | x^t) = -1/2 sum_obs (y_obs - f)^2
* quantile:     log p(y_obs | x^t) = -sum_obs pinball_kappa(y_obs - f)   (asymmetric Laplace, b = 1)

Gradients flow through eps by reverse mode (no stop-gradient).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .model import DiffusionModel
from .schedule import posterior_mean, reverse_step

log = logging.getLogger(__name__)

VARIANTS = {"ms": "ms", "mean-square": "ms", "q": "quantile", "quantile": "quantile"}
DEFAULT_SCALES = {"ms": 4.0 / 32.0, "quantile": 4.0}
QUANTILE_SCALE_GRID = (1.0, 2.0, 4.0, 8.0)


@dataclass
class ObservationMask:
    """Observed entries of an (L, C) window and their (normalized) values."""

    observed: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)
        self.values = np.where(self.observed, np.asarray(self.values, dtype=np.float64), 0.0)
        if self.observed.shape != self.values.shape or self.observed.ndim != 2:
            raise ShapeError(f"mask/values must both be (L, C), got {self.observed.shape}, {self.values.shape}")

    @property
    def shape(self):
        return self.observed.shape

    @property
    def target(self):
        return ~self.observed

    @classmethod
    def for_window(cls, window, observed_steps, lags=(), guide_lags=True):
        """Mask for a normalized (L, C) window given the observed timesteps of channel 0.

        Lag channel j at step i copies step i - lags[j-1]; it counts as observed
        when that source step is observed or precedes the window. With
        ``guide_lags=False`` only channel 0 enters the guidance term.
        """
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 1:
            window = window[:, None]
        L, C = window.shape
        observed_steps = np.asarray(observed_steps, dtype=bool)
        if observed_steps.shape != (L,):
            raise ShapeError(f"observed_steps must have length {L}")
        if C != 1 + len(lags):
            raise ShapeError(f"window has {C} channels but {len(lags)} lags were given")
        observed = np.zeros((L, C), dtype=bool)
        observed[:, 0] = observed_steps
        if guide_lags:
            for j, lag in enumerate(lags, start=1):
                src = np.arange(L) - lag
                observed[:, j] = np.where(src < 0, True, observed_steps[np.clip(src, 0, L - 1)])
        return cls(observed, window)


@dataclass(frozen=True)
class GuidanceConfig:
    variant: str = "quantile"
    scale: float | None = None
    laplace_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown guidance variant {self.variant!r}")
        object.__setattr__(self, "variant", VARIANTS[self.variant])
        if self.scale is None:
            object.__setattr__(self, "scale", DEFAULT_SCALES[self.variant])
        if self.scale < 0:
            raise ParameterError("guidance scale must be >= 0")
        if self.laplace_scale != 1.0:
            raise ParameterError("the asymmetric Laplace scale is fixed to 1")


def assign_quantile_levels(n: int) -> np.ndarray:
    """Evenly spaced levels i / (n + 1), i = 1..n, one per sample path."""
    if n < 1:
        raise ParameterError("need at least one quantile level")
    return np.arange(1, n + 1) / (n + 1)


def _check_kappa(kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0) or np.any(kappa >= 1):
        raise ParameterError(f"quantile level must lie in (0, 1), got {kappa}")
    return kappa


def _rows(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim)) if a.ndim else a


def _residual_weight(u, observed, variant, kappa):
    """d log p / d f on each entry (before the chain rule through f)."""
    if variant == "ms":
        return np.where(observed, u, 0.0)
    k = _rows(kappa, u.ndim)
    slope = np.where(u > 0, k, np.where(u < 0, k - 1.0, 0.0))
    return np.where(observed, slope, 0.0)


def guided_terms(model: DiffusionModel, x_t, t, observed, values, variant, kappa=None):
    """Return ``(eps_pred, score)`` where score = grad_x log p(y_obs | x^t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.any(observed):
        raise ParameterError("guidance needs at least one observed entry")
    ab = _rows(model.schedule.alpha_bar_at(t), x_t.ndim)
    eps, pull = model.eps_and_pullback(x_t, t)
    f = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    r = _residual_weight(values - f, observed, variant, kappa)
    score = (r - np.sqrt(1.0 - ab) * pull(r)) / np.sqrt(ab)
    return eps, score


def ms_guidance_score(model: DiffusionModel, x_t, t, mask: ObservationMask) -> np.ndarray:
    return guided_terms(model, x_t, t, mask.observed, mask.values, "ms")[1]


def quantile_guidance_score(model: DiffusionModel, x_t, t, mask: ObservationMask, kappa) -> np.ndarray:
    kappa = _check_kappa(kappa)
    return guided_terms(model, x_t, t, mask.observed, mask.values, "quantile", kappa)[1]


def one_step_estimate(model: DiffusionModel, x_t, t):
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _rows(model.schedule.alpha_bar_at(t), x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * model.eps(x_t, t)) / np.sqrt(ab)


def ms_log_density(model: DiffusionModel, x_t, t, mask: ObservationMask) -> float:
    """Unnormalized Gaussian guidance log-likelihood (sum over all entries)."""
    u = mask.values - one_step_estimate(model, x_t, t)
    return float(-0.5 * np.sum(np.where(mask.observed, u * u, 0.0)))


def quantile_log_density(model: DiffusionModel, x_t, t, mask: ObservationMask, kappa) -> float:
    u = mask.values - one_step_estimate(model, x_t, t)
    k = _rows(_check_kappa(kappa), u.ndim)
    loss = np.maximum(k * u, (k - 1.0) * u)
    return float(-np.sum(np.where(mask.observed, loss, 0.0)))


def guided_reverse_step(model: DiffusionModel, x_t, t, mask: ObservationMask | None, cfg: GuidanceConfig, kappa, noise):
    """x^{t-1} = mu(x^t, t) + sigma_t noise + s sigma_t^2 grad log p(y_obs | x^t)."""
    if cfg.scale == 0 or mask is None:
        return reverse_step(x_t, model.eps(x_t, t), t, noise, model.schedule)
    if cfg.variant == "quantile":
        kappa = _check_kappa(kappa)
    eps, score = guided_terms(model, x_t, t, mask.observed, mask.values, cfg.variant, kappa)
    out = reverse_step(x_t, eps, t, noise, model.schedule)
    sigma2 = _rows(model.schedule.sigma2_at(t), out.ndim)
    return out + cfg.scale * sigma2 * score


def chain_rng(seed: int, window: int, chain: int) -> np.random.Generator:
    return np.random.default_rng([seed, window, chain])


def sample_paths(model: DiffusionModel, masks, cfg: GuidanceConfig, n_samples: int, seed: int, chunk_size: int = 256, kappas=None):
    """Run guided (or, with ``masks[w] is None``, unconditional) reverse diffusion.

    ``masks`` is a list with one entry per window. Chain i of window w uses its
    own generator seeded by (seed, w, i), so the result does not depend on
    ``chunk_size``. For the quantile variant chain i is guided towards level
    i / (n_samples + 1), unless ``kappas`` gives the levels explicitly. Returns
    normalized paths of shape (n_windows, n_samples, L, C).
    """
    if n_samples < 1:
        raise ParameterError("need at least one sample path")
    cfg = cfg if cfg is not None else GuidanceConfig("ms", 0.0)
    L, C = model.config.L, model.config.C
    T = model.schedule.T
    if kappas is None:
        kappas = assign_quantile_levels(n_samples)
    else:
        kappas = _check_kappa(np.broadcast_to(np.asarray(kappas, dtype=np.float64), (n_samples,)))
    jobs = [(w, i) for w in range(len(masks)) for i in range(n_samples)]
    out = np.empty((len(masks), n_samples, L, C))
    for start in range(0, len(jobs), chunk_size):
        chunk = jobs[start : start + chunk_size]
        B = len(chunk)
        noise = np.empty((B, T, L, C))
        for b, (w, i) in enumerate(chunk):
            noise[b] = chain_rng(seed, w, i).standard_normal((T, L, C))
        guided = [masks[w] is not None for w, _ in chunk]
        observed = np.zeros((B, L, C), dtype=bool)
        values = np.zeros((B, L, C))
        for b, (w, _) in enumerate(chunk):
            if guided[b]:
                observed[b] = masks[w].observed
                values[b] = masks[w].values
        kappa = np.array([kappas[i] for _, i in chunk])
        use_guidance = cfg.scale != 0 and any(guided)
        x = noise[:, 0]
        for t in range(T, 0, -1):
            z = noise[:, T - t + 1] if t > 1 else np.zeros((B, L, C))
            if use_guidance:
                eps, score = guided_terms(model, x, t, observed, values, cfg.variant, kappa)
                x_next = reverse_step(x, eps, t, z, model.schedule)
                x = x_next + cfg.scale * model.schedule.sigma2_at(t) * score
            else:
                x = reverse_step(x, model.eps(x, t), t, z, model.schedule)
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.isfinite(x))[0][0])
                w, i = chunk[bad]
                raise NumericError(f"non-finite sample in window {w}, chain {i} at diffusion step {t}")
        for b, (w, i) in enumerate(chunk):
            out[w, i] = x[b]
    return out


@dataclass
class ForecastEnsemble:
    """Sample paths over the target indices, in original units."""

    samples: np.ndarray
    target_index: np.ndarray
    scale: float = 1.0
    paths: np.ndarray | None = None

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def quantiles(self, levels=None):
        from .metrics import QUANTILE_LEVELS, empirical_quantiles

        levels = QUANTILE_LEVELS if levels is None else levels
        return empirical_quantiles(self.samples, levels)

    def mean(self):
        return self.samples.mean(axis=0)


def self_guided_sample(model: DiffusionModel, mask: ObservationMask, cfg: GuidanceConfig, n_samples: int, seed: int, scale: float = 1.0) -> ForecastEnsemble:
    """Guided sampling for one window; returns channel 0 on the unobserved steps, de-normalized."""
    paths = sample_paths(model, [mask], cfg, n_samples, seed)[0, :, :, 0] * scale
    target = np.flatnonzero(~mask.observed[:, 0])
    return ForecastEnsemble(paths[:, target], target, scale, paths)
