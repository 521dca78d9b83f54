"""Seasonal Naive and the closed-form ridge (Linear) forecaster."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericError, ParameterError, ShapeError


def seasonal_naive(context, season: int, horizon: int) -> np.ndarray:
    """Repeat the last observed season: forecast[h] = context[n - season + h mod season]."""
    context = np.asarray(context, dtype=np.float64)
    n = len(context)
    if season < 1 or n < season:
        raise ParameterError(f"context of length {n} is shorter than the season {season}")
    return context[n - season + np.arange(horizon) % season]


def ridge_fit(X, Y, alpha: float = 1.0) -> np.ndarray:
    """W = (X^T X + alpha I)^{-1} X^T Y via a Cholesky solve."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"design {X.shape} and targets {Y.shape} do not align")
    if alpha < 0:
        raise ParameterError("ridge strength must be >= 0")
    gram = X.T @ X + alpha * np.eye(X.shape[1])
    if alpha == 0 and np.linalg.matrix_rank(X) < X.shape[1]:
        raise NumericError("rank-deficient design with alpha = 0")
    try:
        factor = cho_factor(gram)
    except LinAlgError as exc:
        raise NumericError(f"ridge normal equations are singular: {exc}") from None
    return cho_solve(factor, X.T @ Y)


def ridge_forecast(weights, context) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    if context.shape[-1] != weights.shape[0]:
        raise ShapeError(f"context length {context.shape[-1]} != {weights.shape[0]} ridge inputs")
    return context @ weights


def _scales(context):
    s = np.mean(np.abs(context), axis=-1)
    return np.where(s > 0, s, 1.0)


@dataclass
class LinearForecaster:
    """Ridge regression from a mean-scaled context to the mean-scaled horizon."""

    weights: np.ndarray
    context_length: int
    horizon: int

    @classmethod
    def fit(cls, windows, context_length: int, horizon: int, alpha: float = 1.0):
        windows = np.asarray(windows, dtype=np.float64)
        scale = _scales(windows[:, :context_length])[:, None]
        X = windows[:, :context_length] / scale
        Y = windows[:, context_length : context_length + horizon] / scale
        return cls(ridge_fit(X, Y, alpha), context_length, horizon)

    def predict(self, contexts) -> np.ndarray:
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))[:, -self.context_length :]
        scale = _scales(contexts)[:, None]
        return ridge_forecast(self.weights, contexts / scale) * scale
