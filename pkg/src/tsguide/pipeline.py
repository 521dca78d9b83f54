"""End-to-end steps shared by the command line and the experiments: train, forecast, refine, synthesize, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .baselines import LinearForecaster, seasonal_naive
from .data import Dataset, DataError, Series, WindowSampler, build_lag_matrix, make_missing_mask, mean_scale_factor
from .denoiser import DenoiserConfig, init_params
from .errors import ParameterError
from .guidance import GuidanceConfig, ObservationMask, sample_paths
from .io import ForecastRecord
from .metrics import QUANTILE_LEVELS, aggregate_crps, empirical_quantiles, lps, per_series_crps
from .model import DiffusionModel
from .refine import RefinementConfig, RefinementInput, refine, representative_step
from .schedule import build_linear_schedule
from .training import TrainConfig, train

log = logging.getLogger(__name__)

TAU_BATCH = 1024
SCALE_POOL = 1024


@dataclass(frozen=True)
class WindowSpec:
    context_length: int
    horizon: int
    lags: tuple = ()

    @property
    def L(self):
        return self.context_length + self.horizon

    @property
    def history(self):
        return max(self.lags, default=0)


def spec_of(model: DiffusionModel) -> WindowSpec:
    meta = model.metadata
    try:
        return WindowSpec(int(meta["context_length"]), int(meta["horizon"]), tuple(meta.get("lags", ())))
    except KeyError as exc:
        raise ParameterError(f"checkpoint metadata lacks {exc}") from None


def train_model(dataset: Dataset, spec: WindowSpec, dcfg: DenoiserConfig, tcfg: TrainConfig, schedule=(100, 1e-4, 0.1), progress=None):
    """Fit a denoiser on random windows; returns ``(model, loss_history)``.

    The metadata records the window layout, a pool of training-window scales
    (used to de-normalize synthetic samples) and the representative step tau
    computed on a batch of 1024 fresh windows.
    """
    if dcfg.L != spec.L or dcfg.C != 1 + len(spec.lags):
        raise ParameterError(f"denoiser expects (L, C) = ({dcfg.L}, {dcfg.C}) but windows are ({spec.L}, {1 + len(spec.lags)})")
    sched = build_linear_schedule(*schedule)
    sampler = WindowSampler(dataset, spec.L, spec.context_length, spec.lags)
    params, history = train(init_params(dcfg, tcfg.seed), sampler, sched, tcfg, progress)
    model = DiffusionModel(params, sched)
    rng = np.random.default_rng([tcfg.seed, 2])
    windows, _ = sampler.sample(rng, TAU_BATCH)
    tau, losses = representative_step(model, windows, seed=tcfg.seed)
    scales = sampler.scales(np.random.default_rng([tcfg.seed, 3]), SCALE_POOL)
    model.metadata = {
        "context_length": spec.context_length,
        "horizon": spec.horizon,
        "lags": list(spec.lags),
        "freq": dataset.freq,
        "representative_step": tau,
        "step_losses": [float(v) for v in losses],
        "train_scales": [float(s) for s in scales],
        "final_loss": history[-1],
    }
    return model, history


def _window_source(series: Series, spec: WindowSpec, holdout: bool):
    """Raw values covering ``[history_start, end)`` (NaN past the series end) and the indices."""
    end = len(series) if holdout else len(series) + spec.horizon
    window_start = end - spec.L
    history_start = window_start - spec.history
    if history_start < 0:
        raise DataError(f"series {series.item_id}: needs {spec.L + spec.history} points, has {len(series)}")
    raw = np.full(end - history_start, np.nan)
    avail = min(len(series), end) - history_start
    raw[:avail] = series.values[history_start : history_start + avail]
    return raw, history_start, window_start, end


def observed_pattern(spec: WindowSpec, missing: str, ratio: float, rng) -> np.ndarray:
    return make_missing_mask(missing, ratio, spec.context_length, spec.horizon, rng)


def prepare_window(series: Series, spec: WindowSpec, observed_steps=None, holdout=True, guide_lags=True):
    """Normalized guidance mask and bookkeeping for the last window of ``series``.

    Returns ``(mask, scale, record_fields)``; hidden context steps are NaN in
    the recorded history and never enter the scale or the guidance term.
    """
    raw, history_start, window_start, end = _window_source(series, spec, holdout)
    if observed_steps is None:
        observed_steps = np.arange(spec.L) < spec.context_length
    observed_steps = np.asarray(observed_steps, dtype=bool)
    off = window_start - history_start
    raw[off : off + spec.L][~observed_steps] = np.nan
    ctx = raw[off : off + spec.context_length]
    scale = mean_scale_factor(np.nan_to_num(ctx), np.isfinite(ctx))
    matrix = build_lag_matrix(np.nan_to_num(raw), off, spec.L, spec.lags) / scale
    # history before the window is never hidden, so lag sources there count as observed
    mask = ObservationMask.for_window(matrix, observed_steps, spec.lags, guide_lags)
    fields = dict(
        item_id=series.item_id,
        start=end - spec.horizon,
        end=end,
        history=raw[: end - spec.horizon - history_start],
        history_start=history_start,
        window_start=window_start,
        observed=observed_steps,
        scale=scale,
    )
    return mask, scale, fields


def guided_forecast(
    model: DiffusionModel,
    dataset: Dataset,
    cfg: GuidanceConfig,
    n_samples: int = 100,
    seed: int = 0,
    missing: str = "none",
    ratio: float = 0.0,
    holdout: bool = True,
    guide_lags: bool = True,
    chunk_size: int = 256,
):
    """Self-guided ensembles for the last window of every series (one ForecastRecord each)."""
    spec = spec_of(model)
    masks, fields = [], []
    for k, series in enumerate(dataset.series):
        steps = observed_pattern(spec, missing, ratio, np.random.default_rng([seed, 1, k]))
        mask, _, f = prepare_window(series, spec, steps, holdout, guide_lags)
        masks.append(mask)
        fields.append(f)
    paths = sample_paths(model, masks, cfg, n_samples, seed, chunk_size)
    records = []
    for k, f in enumerate(fields):
        samples = paths[k, :, spec.context_length :, 0] * f["scale"]
        records.append(ForecastRecord(samples=samples, quantiles=empirical_quantiles(samples), **f))
    return records


def baseline_forecast(dataset: Dataset, spec: WindowSpec, method: str = "seasonal-naive", season: int = 24, train_windows=None, holdout=True):
    """Point forecasts (one sample path) from Seasonal Naive or the Linear ridge model."""
    if method == "linear" and train_windows is None:
        raise ParameterError("the linear baseline needs training windows")
    linear = LinearForecaster.fit(train_windows, spec.context_length, spec.horizon) if method == "linear" else None
    records = []
    for series in dataset.series:
        _, _, f = prepare_window(series, spec, holdout=holdout)
        ctx = f["history"][f["window_start"] - f["history_start"] :]
        if method == "seasonal-naive":
            point = seasonal_naive(ctx, season, spec.horizon)
        elif method == "linear":
            point = linear.predict(ctx)[0]
        else:
            raise ParameterError(f"unknown baseline {method!r}")
        records.append(ForecastRecord(samples=point[None], **f))
    return records


def refine_forecasts(model: DiffusionModel, records, cfg: RefinementConfig, n_paths: int = 100, seed: int = 0, tau=None):
    """Refine every record's sample paths; point forecasts are replicated ``n_paths`` times first."""
    spec = spec_of(model)
    tau = tau if tau is not None else cfg.tau if cfg.tau is not None else model.metadata.get("representative_step")
    if tau is None:
        raise ParameterError("no representative step: set refine.tau or use a checkpoint that records it")
    if not records:
        return []
    contexts, bases, extras, sizes = [], [], [], []
    for rec in records:
        if rec.horizon != spec.horizon:
            raise ParameterError(f"{rec.item_id}: forecast horizon {rec.horizon} != model horizon {spec.horizon}")
        base = rec.samples if len(rec.samples) > 1 else np.repeat(rec.samples, n_paths, axis=0)
        ctx = rec.history[rec.window_start - rec.history_start :]
        if len(ctx) != spec.context_length or not np.all(np.isfinite(rec.history)):
            raise ParameterError(f"{rec.item_id}: refinement needs a fully observed context of length {spec.context_length}")
        if spec.lags:
            # lag channels: shifted copies of history + base path, held fixed during refinement
            full = np.concatenate([np.repeat(rec.history[None], len(base), 0), base], axis=1)
            off = rec.window_start - rec.history_start
            extras.append(np.stack([build_lag_matrix(row, off, spec.L, spec.lags)[:, 1:] for row in full]))
        contexts.append(np.repeat(ctx[None], len(base), 0))
        bases.append(base)
        sizes.append(len(base))
    if len(set(sizes)) != 1:
        raise ParameterError("all records must carry the same number of sample paths")
    inp = RefinementInput.combine(np.concatenate(contexts), np.concatenate(bases), np.concatenate(extras) if spec.lags else None)
    refined = refine(model, inp, cfg, seed=seed, tau=tau, paths_per_window=sizes[0])
    out = []
    for k, rec in enumerate(records):
        samples = refined[k * sizes[0] : (k + 1) * sizes[0]]
        out.append(
            ForecastRecord(
                rec.item_id, rec.start, rec.end, samples, rec.history, rec.history_start, rec.window_start,
                rec.observed, rec.scale, empirical_quantiles(samples), dict(rec.extra),
            )
        )
    return out


def synthesize(model: DiffusionModel, n_samples: int, seed: int = 0, chunk_size: int = 256):
    """Unconditional windows (channel 0) de-normalized with scales drawn from the training pool."""
    spec = spec_of(model)
    if n_samples == 0:
        return np.zeros((0, spec.L)), np.zeros(0)
    pool = np.asarray(model.metadata.get("train_scales") or [1.0])
    paths = sample_paths(model, [None], GuidanceConfig("ms", 0.0), n_samples, seed, chunk_size)[0, :, :, 0]
    scales = np.random.default_rng([seed, 4]).choice(pool, size=n_samples, replace=True)
    return paths * scales[:, None], scales


def _align(records, dataset: Dataset):
    by_id = {s.item_id: s for s in dataset.series}
    missing = [r.item_id for r in records if r.item_id not in by_id]
    if missing:
        raise DataError(f"forecast series not in the dataset: {', '.join(missing[:10])}")
    short = [r.item_id for r in records if r.end > len(by_id[r.item_id])]
    if short:
        raise DataError(f"no ground truth for the forecast horizon of: {', '.join(short[:10])}")
    return [by_id[r.item_id].values[r.start : r.end] for r in records]


def validation_split(dataset: Dataset, horizon: int) -> Dataset:
    """The dataset minus its final ``horizon`` points: its last window is the validation window."""
    return dataset.drop_tail(horizon)


def tune_guidance_scale(model: DiffusionModel, dataset: Dataset, variant="quantile", grid=(1.0, 2.0, 4.0, 8.0), n_samples=16, seed=0):
    """Pick the guidance scale with the lowest CRPS on the validation window; returns ``(scale, scores)``."""
    val = validation_split(dataset, spec_of(model).horizon)
    scores = {}
    for s in grid:
        recs = guided_forecast(model, val, GuidanceConfig(variant, float(s)), n_samples=n_samples, seed=seed)
        scores[float(s)] = evaluate_forecasts(recs, val)["aggregate"]
    best = min(scores, key=lambda s: (scores[s], s))
    log.info("guidance scale %s selected from %s", best, scores)
    return best, scores


def tune_refinement(model: DiffusionModel, base_val, dataset: Dataset, cfg: RefinementConfig, etas=(0.01, 0.05), gammas=(0.1, 1.0), n_paths=16, seed=0):
    """Pick (eta, gamma) by CRPS of refined validation forecasts ``base_val``; returns ``(cfg, scores)``."""
    from dataclasses import replace

    val = validation_split(dataset, spec_of(model).horizon)
    scores = {}
    for eta in etas:
        for gamma in gammas:
            out = refine_forecasts(model, base_val, replace(cfg, eta=eta, gamma=gamma), n_paths=n_paths, seed=seed)
            scores[(eta, gamma)] = evaluate_forecasts(out, val)["aggregate"]
    eta, gamma = min(scores, key=lambda k: (scores[k], k))
    return replace(cfg, eta=eta, gamma=gamma), scores


def evaluate_forecasts(records, dataset: Dataset) -> dict:
    actuals = _align(records, dataset)
    forecasts = [r.samples for r in records]
    per = per_series_crps(forecasts, actuals)
    return {
        "metric": "crps",
        "aggregate": aggregate_crps(forecasts, actuals),
        "per_series": {r.item_id: v for r, v in zip(records, per)},
        "n_series": len(records),
        "quantile_levels": [float(k) for k in QUANTILE_LEVELS],
    }


def test_windows(dataset: Dataset, length: int) -> np.ndarray:
    rows = [s.values[-length:] for s in dataset.series if len(s) >= length]
    if not rows:
        raise DataError(f"no series with at least {length} points")
    return np.array(rows)


def evaluate_samples(samples, dataset: Dataset, context_length: int, horizon: int) -> dict:
    samples = np.asarray(samples, dtype=np.float64)
    L = context_length + horizon
    if samples.ndim != 2 or samples.shape[1] < L:
        raise DataError(f"synthetic samples must have at least {L} steps")
    score = lps(samples[:, -L:], test_windows(dataset, L), context_length, horizon)
    return {"metric": "lps", "aggregate": score, "n_samples": len(samples), "context_length": context_length, "horizon": horizon}
