"""Training loop for the noise-prediction network (Adam + global-norm clipping)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import denoiser
from .denoiser import DenoiserParams
from .errors import NumericError, ParameterError
from .schedule import NoiseSchedule, forward_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1000
    batches_per_epoch: int = 128
    grad_clip_threshold: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "batches_per_epoch", "grad_clip_threshold"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


def clip_by_global_norm(grad: np.ndarray, threshold: float):
    """Rescale ``grad`` so its L2 norm is at most ``threshold``; returns (grad, original norm)."""
    norm = float(np.sqrt(np.sum(np.square(grad, dtype=np.float64))))
    if norm > threshold:
        grad = grad * (threshold / norm)
    return grad, norm


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.step_count = 0

    def update(self, grad):
        """Return the parameter increment for ``grad``."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.step_count)
        v_hat = self.v / (1 - b2**self.step_count)
        return (-self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(self.m.dtype)


def loss_and_grad(params: DenoiserParams, x_t, t, eps):
    """Batch denoising loss (mean over all elements) and its parameter gradient."""
    out, pullback = denoiser.vjp(params, x_t, t)
    resid = out - eps.astype(out.dtype)
    loss = float(np.mean(np.square(resid, dtype=np.float64)))
    _, grad = pullback(resid * (2.0 / resid.size), want_params=True)
    return loss, grad


def train(params: DenoiserParams, dataset, sched: NoiseSchedule, cfg: TrainConfig, progress=None):
    """Fit ``params`` on windows drawn from ``dataset``.

    ``dataset`` must provide ``sample(rng, n) -> (windows (n, L, C), ids)`` with
    windows already normalized. Returns the trained parameters and the mean loss
    of every epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    flat = params.flat.copy()
    opt = Adam(flat.size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, dtype=flat.dtype)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.batches_per_epoch):
            windows, ids = dataset.sample(rng, cfg.batch_size)
            t = rng.integers(1, sched.T + 1, size=len(windows))
            eps = rng.standard_normal(windows.shape)
            x_t = forward_sample(windows, t, eps, sched)
            where = f"step {step} (epoch {epoch}); t={t.tolist()} windows={list(ids)}"
            try:
                loss, grad = loss_and_grad(params.replace(flat), x_t, t, eps)
            except NumericError as exc:
                raise NumericError(f"{exc} at {where}") from None
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite loss at {where}")
            grad, _ = clip_by_global_norm(grad, cfg.grad_clip_threshold)
            flat = flat + opt.update(grad.astype(flat.dtype))
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, history[-1])
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return params.replace(flat), history
