"""Pinball loss, sample-based CRPS and the Linear Predictive Score."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

QUANTILE_LEVELS = np.round(np.arange(1, 10) / 10, 10)

# Empirical quantiles interpolate linearly between order statistics placed at
# the midpoints (k - 0.5) / N ("hazen" in numpy).
QUANTILE_METHOD = "hazen"


def pinball_loss(q, y, kappa):
    """(kappa - 1{y < q}) * (y - q), element-wise."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0) or np.any(kappa >= 1):
        raise ParameterError("quantile level must lie in (0, 1)")
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (kappa - (y < q)) * (y - q)


def empirical_quantiles(samples, levels=QUANTILE_LEVELS) -> np.ndarray:
    """Quantiles over axis 0 of ``samples``; result has shape (len(levels),) + samples.shape[1:]."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ParameterError("empty ensemble")
    return np.quantile(samples, levels, axis=0, method=QUANTILE_METHOD)


def quantile_losses(samples, y, levels=QUANTILE_LEVELS) -> np.ndarray:
    """2 * pinball loss per level and entry, shape (len(levels),) + y.shape."""
    y = np.asarray(y, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[1:] != y.shape:
        raise ShapeError(f"ensemble shape {samples.shape} does not match target shape {y.shape}")
    q = empirical_quantiles(samples, levels)
    k = np.asarray(levels, dtype=np.float64).reshape((-1,) + (1,) * y.ndim)
    return 2.0 * pinball_loss(q, y, k)


def crps(ensemble, y, levels=QUANTILE_LEVELS):
    """CRPS approximated at ``levels``: mean over levels of 2 * pinball(quantile, y).

    ``ensemble`` has the sample axis first; ``y`` matches the remaining axes.
    """
    return quantile_losses(ensemble, y, levels).mean(axis=0)


def aggregate_crps(forecasts, actuals, levels=QUANTILE_LEVELS) -> float:
    """Normalized average quantile loss: sum of 2 * pinball over series, steps and levels / (n_levels * sum |y|)."""
    num, denom = 0.0, 0.0
    for samples, y in zip(forecasts, actuals, strict=True):
        num += float(np.sum(quantile_losses(samples, y, levels)))
        denom += float(np.sum(np.abs(y)))
    if denom == 0:
        raise ParameterError("aggregate CRPS undefined: all actuals are zero")
    return num / (len(levels) * denom)


def per_series_crps(forecasts, actuals, levels=QUANTILE_LEVELS) -> list:
    out = []
    for samples, y in zip(forecasts, actuals, strict=True):
        denom = float(np.sum(np.abs(y)))
        num = float(np.sum(quantile_losses(samples, y, levels)))
        out.append(num / (len(levels) * denom) if denom > 0 else float("nan"))
    return out


def normalized_deviation(point_forecasts, actuals) -> float:
    """Aggregate 0.5-quantile loss sum |y - q| / sum |y| (the CRPS of point forecasts)."""
    num, denom = 0.0, 0.0
    for q, y in zip(point_forecasts, actuals, strict=True):
        num += float(np.sum(np.abs(np.asarray(y) - np.asarray(q))))
        denom += float(np.sum(np.abs(y)))
    if denom == 0:
        raise ParameterError("normalized deviation undefined: all actuals are zero")
    return num / denom


def lps(synthetic, real_test, context_length: int, horizon: int, alpha: float = 1.0) -> float:
    """Linear Predictive Score.

    Fits a ridge regressor (no intercept, mean-scaled windows) from the first
    ``context_length`` points of each synthetic window to the next ``horizon``
    points, then returns its aggregate 0.5-quantile loss on the real test windows.
    """
    from .baselines import LinearForecaster

    synthetic = np.asarray(synthetic, dtype=np.float64)
    real_test = np.asarray(real_test, dtype=np.float64)
    L = context_length + horizon
    if synthetic.ndim != 2 or synthetic.shape[1] != L or real_test.ndim != 2 or real_test.shape[1] != L:
        raise ShapeError(f"expected windows of length {L}")
    model = LinearForecaster.fit(synthetic, context_length, horizon, alpha)
    preds = model.predict(real_test[:, :context_length])
    return normalized_deviation(preds, real_test[:, context_length:])
