"""Energy-based refinement of base forecasts with (overdamped) Langevin Monte Carlo.

The energy of a normalized window y given the combined initial guess y~ is

    E(y) = ||eps(x^tau(y, eps), tau) - eps||^2 + lam * R(y, y~),
    x^tau(y, eps) = sqrt(ab_tau) y + sqrt(1 - ab_tau) eps,

i.e. the denoising loss at a single representative step tau stands in for
-log p(y). R is 1/2 ||y - y~||^2 ("ms") or the pinball loss ("q"). The
update is y <- y - eta grad E + sqrt(2 eta gamma) xi; gamma = 0 is plain
gradient descent (maximum-likelihood refinement).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .guidance import assign_quantile_levels
from .model import DiffusionModel
from .schedule import forward_sample

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class RefinementConfig:
    variant: str = "lmc"
    regularizer: str = "ms"
    eta: float = 0.05
    gamma: float = 1.0
    lam: float = 1.0
    iterations: int = 20
    tau: int | None = None
    fresh_eps_per_iter: bool = True

    def __post_init__(self):
        if self.variant not in ("lmc", "ml"):
            raise ParameterError(f"variant must be 'lmc' or 'ml', got {self.variant!r}")
        if self.regularizer not in ("ms", "q"):
            raise ParameterError(f"regularizer must be 'ms' or 'q', got {self.regularizer!r}")
        if self.eta < 0 or self.gamma < 0 or self.lam < 0:
            raise ParameterError("eta, gamma and lam must be non-negative")
        if self.iterations < 1:
            raise ParameterError("need at least one refinement iteration")

    @property
    def noise_factor(self) -> float:
        return 0.0 if self.variant == "ml" else self.gamma

    def to_dict(self):
        return asdict(self)


@dataclass
class RefinementInput:
    """Rows of normalized combined series y~ (observed context + base forecast).

    ``combined`` is (B, L); ``observed`` (B, L) marks the entries that came
    from the data; ``extra`` optionally holds fixed lag channels (B, L, C-1);
    ``scale`` (B,) maps back to original units.
    """

    combined: np.ndarray
    observed: np.ndarray
    scale: np.ndarray
    extra: np.ndarray | None = None

    def __post_init__(self):
        self.combined = np.atleast_2d(np.asarray(self.combined, dtype=np.float64))
        self.observed = np.broadcast_to(np.asarray(self.observed, dtype=bool), self.combined.shape)
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), self.combined.shape[:1])
        if self.extra is not None:
            self.extra = np.asarray(self.extra, dtype=np.float64)
            if self.extra.shape[:2] != self.combined.shape:
                raise ShapeError("lag channels must align with the combined series")

    @property
    def n_rows(self):
        return self.combined.shape[0]

    @classmethod
    def combine(cls, context, base_forecast, extra=None):
        """Join raw context rows (B, Lc) with base forecasts (B, H) and mean-scale each row.

        NaN context entries are treated as unobserved; the scale is the mean
        absolute observed context value (1 when that is 0).
        """
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        base = np.atleast_2d(np.asarray(base_forecast, dtype=np.float64))
        if context.shape[0] != base.shape[0]:
            context = np.broadcast_to(context, (base.shape[0], context.shape[1]))
        observed = np.concatenate([np.isfinite(context), np.zeros(base.shape, dtype=bool)], axis=1)
        if np.any(~observed[:, : context.shape[1]]):
            raise ParameterError("refinement needs a fully observed context (the base forecast covers only the horizon)")
        raw = np.concatenate([context, base], axis=1)
        absctx = np.abs(context)
        scale = absctx.mean(axis=1)
        scale = np.where(scale > 0, scale, 1.0)
        if extra is not None:
            extra = np.asarray(extra, dtype=np.float64) / scale[:, None, None]
        return cls(raw / scale[:, None], observed, scale, extra)

    def as_window(self, y):
        """Stack y (B, L) with the fixed lag channels into (B, L, C)."""
        x = y[..., None]
        if self.extra is not None:
            x = np.concatenate([x, self.extra], axis=-1)
        return x


def per_step_losses(model: DiffusionModel, windows, seed: int = 0, chunk_size: int = 1024) -> np.ndarray:
    """Mean denoising loss at every step t = 1..T over ``windows`` (one eps draw per window and step)."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ParameterError("need a non-empty batch of (n, L, C) windows")
    rng = np.random.default_rng(seed)
    T = model.schedule.T
    losses = np.empty(T)
    for t in range(1, T + 1):
        eps = rng.standard_normal(windows.shape)
        total = 0.0
        for s in range(0, len(windows), chunk_size):
            x = forward_sample(windows[s : s + chunk_size], t, eps[s : s + chunk_size], model.schedule)
            diff = model.eps(x, t) - eps[s : s + chunk_size]
            total += float(np.sum(diff * diff))
        losses[t - 1] = total / windows.size
    return losses


def representative_step_from_losses(losses) -> int:
    """Step whose loss is closest to the mean over all steps; ties go to the smaller step."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ParameterError("empty loss curve")
    dist = (losses - losses.mean()) ** 2
    return int(np.argmin(dist)) + 1


def representative_step(model: DiffusionModel, windows, seed: int = 0):
    """Return ``(tau, per_step_losses)``."""
    losses = per_step_losses(model, windows, seed)
    return representative_step_from_losses(losses), losses


def _regularizer(y, ytilde, kind, kappa):
    d = y - ytilde
    if kind == "ms":
        return 0.5 * np.sum(d * d, axis=-1), d
    k = np.asarray(kappa, dtype=np.float64).reshape(-1, 1)
    # pinball loss of the forecast y against "observation" y~
    value = np.sum(np.maximum(k * -d, (k - 1.0) * -d), axis=-1)
    grad = np.where(d < 0, -k, np.where(d > 0, 1.0 - k, 0.0))
    return value, grad


def _prior_terms(model, x, eps, tau):
    ab = model.schedule.alpha_bar_at(tau)
    x_tau = forward_sample(x, tau, eps, model.schedule)
    pred, pull = model.eps_and_pullback(x_tau, tau)
    resid = pred - eps
    value = np.sum(resid * resid, axis=(1, 2))
    grad = 2.0 * np.sqrt(ab) * pull(resid)[..., 0]
    return value, grad


def energy(model: DiffusionModel, y, inp: RefinementInput, cfg: RefinementConfig, eps, tau: int, kappa=None):
    """Per-row energy values (B,)."""
    y = np.atleast_2d(y)
    x_tau = forward_sample(inp.as_window(y), tau, eps, model.schedule)
    resid = model.eps(x_tau, tau) - eps
    reg, _ = _regularizer(y, inp.combined, cfg.regularizer, kappa)
    return np.sum(resid * resid, axis=(1, 2)) + cfg.lam * reg


def energy_grad(model: DiffusionModel, y, inp: RefinementInput, cfg: RefinementConfig, eps, tau: int, kappa=None):
    """Gradient of the energy with respect to y, shape (B, L)."""
    y = np.atleast_2d(y)
    _, g_prior = _prior_terms(model, inp.as_window(y), eps, tau)
    _, g_reg = _regularizer(y, inp.combined, cfg.regularizer, kappa)
    return g_prior + cfg.lam * g_reg


def refine(
    model: DiffusionModel,
    inp: RefinementInput,
    cfg: RefinementConfig,
    seed: int = 0,
    tau: int | None = None,
    paths_per_window: int | None = None,
    return_full=False,
):
    """Langevin refinement of every row of ``inp``; returns the unobserved part in original units.

    Rows are consecutive groups of ``paths_per_window`` sample paths (default:
    all rows belong to one window). Row b draws its eps and xi from a
    generator seeded by (seed, b); with the "q" regularizer, path i of a
    window uses quantile level (i + 1) / (paths_per_window + 1). Observed
    entries are reset to their data values after the final iteration.
    """
    tau = tau if tau is not None else cfg.tau
    if tau is None:
        raise ParameterError("refinement needs a representative step (cfg.tau or tau=)")
    B, L = inp.combined.shape
    C = model.config.C
    n_paths = paths_per_window or B
    if B % n_paths:
        raise ShapeError(f"{B} rows do not split into windows of {n_paths} paths")
    kappa = np.tile(assign_quantile_levels(n_paths), B // n_paths) if cfg.regularizer == "q" else None
    rngs = [np.random.default_rng([seed, b]) for b in range(B)]
    eps = np.stack([r.standard_normal((L, C)) for r in rngs])
    gamma = cfg.noise_factor
    limit = DIVERGENCE_FACTOR * max(1.0, float(np.max(np.abs(inp.combined))))
    y = inp.combined.copy()
    for i in range(cfg.iterations):
        if i > 0 and cfg.fresh_eps_per_iter:
            eps = np.stack([r.standard_normal((L, C)) for r in rngs])
        xi = np.stack([r.standard_normal(L) for r in rngs])
        grad = energy_grad(model, y, inp, cfg, eps, tau, kappa)
        y = y - cfg.eta * grad + np.sqrt(2.0 * cfg.eta * gamma) * xi
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > limit:
            raise NumericError(f"refinement diverged at iteration {i} (max |y| = {np.max(np.abs(y)):.3g})")
    y = np.where(inp.observed, inp.combined, y)
    out = y * inp.scale[:, None]
    if return_full:
        return out
    target = ~inp.observed[0]
    return out[:, target]
