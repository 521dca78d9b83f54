"""Datasets, windowing, mean scaling, lag channels, missingness masks and toy generators."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_LAGS = {"H": (24, 48, 168), "D": (7, 14)}
# context / prediction lengths per frequency for real datasets
DEFAULT_LENGTHS = {"H": (336, 24), "D": (360, 30)}


class DataError(ParameterError):
    pass


@dataclass
class Series:
    item_id: str
    start: str
    freq: str
    values: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass
class Dataset:
    series: list = field(default_factory=list)
    context_length: int | None = None
    prediction_length: int | None = None

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def freq(self):
        return self.series[0].freq if self.series else None

    def lengths(self):
        freq = self.freq or "H"
        default = DEFAULT_LENGTHS.get(freq, DEFAULT_LENGTHS["H"])
        return (self.context_length or default[0], self.prediction_length or default[1])

    def drop_tail(self, n: int) -> "Dataset":
        """Copy with the final ``n`` points of every series removed."""
        return Dataset(
            [Series(s.item_id, s.start, s.freq, s.values[: len(s) - n]) for s in self.series],
            self.context_length,
            self.prediction_length,
        )


def _parse_record(line: str, lineno: int, path) -> Series:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict) or not {"start", "target"} <= rec.keys():
        raise DataError(f"{path}:{lineno}: record needs 'start' and 'target' fields")
    target = rec["target"]
    if not isinstance(target, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in target
    ):
        raise DataError(f"{path}:{lineno}: 'target' must be an array of numbers")
    values = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}:{lineno}: 'target' contains NaN or infinite values")
    freq = rec.get("freq", "H")
    if freq not in ("H", "D"):
        raise DataError(f"{path}:{lineno}: unsupported freq {freq!r} (expected 'H' or 'D')")
    item_id = str(rec.get("item_id", f"{Path(path).stem}:{lineno}"))
    return Series(item_id, str(rec["start"]), freq, values)


def load_jsonl(path, context_length=None, prediction_length=None) -> Dataset:
    """Read one ``{start, freq, target}`` record per line from a file or a directory of files."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix in (".jsonl", ".json")) if path.is_dir() else [path]
    series = []
    for file in files:
        with open(file) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    series.append(_parse_record(line, lineno, file))
    return Dataset(series, context_length, prediction_length)


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in dataset.series:
            rec = {"item_id": s.item_id, "start": s.start, "freq": s.freq, "target": s.values.tolist()}
            fh.write(json.dumps(rec) + "\n")


@dataclass
class ScaledWindow:
    values: np.ndarray
    scale: float
    origin: tuple = (None, None)

    def inverse(self) -> np.ndarray:
        return self.values * self.scale


def mean_scale_factor(values, observed=None) -> float:
    """Mean absolute value over the observed entries, falling back to 1 when it is 0."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("cannot scale an empty window")
    if observed is not None:
        values = values[np.asarray(observed, dtype=bool)]
    scale = float(np.mean(np.abs(values))) if values.size else 0.0
    return scale if scale > 0 else 1.0


def mean_scale(window, observed=None, origin=(None, None)) -> ScaledWindow:
    """Divide ``window`` by the mean |value| of its observed part (all entries by default)."""
    window = np.asarray(window, dtype=np.float64)
    scale = mean_scale_factor(window, observed)
    return ScaledWindow(window / scale, scale, origin)


def slice_random_window(series: Series, L: int, rng, context_length=None) -> ScaledWindow:
    """Uniformly random length-``L`` slice, scaled by its first ``context_length`` points."""
    n = len(series)
    if n < L:
        raise DataError(f"series {series.item_id} has length {n} < window length {L}")
    offset = int(rng.integers(0, n - L + 1))
    window = series.values[offset : offset + L]
    observed = None
    if context_length is not None:
        observed = np.arange(L) < context_length
    return mean_scale(window, observed, origin=(series.item_id, offset))


def build_lag_matrix(values, offset: int, L: int, lags=()) -> np.ndarray:
    """Window ``values[offset:offset+L]`` plus one channel per lag, shape (L, 1 + len(lags))."""
    values = np.asarray(values, dtype=np.float64)
    if offset < 0 or offset + L > len(values):
        raise DataError(f"window [{offset}, {offset + L}) outside series of length {len(values)}")
    out = np.empty((L, 1 + len(lags)))
    out[:, 0] = values[offset : offset + L]
    for j, lag in enumerate(lags, start=1):
        if offset - lag < 0:
            raise DataError(f"lag {lag} needs {lag - offset} more points of history before offset {offset}")
        out[:, j] = values[offset - lag : offset - lag + L]
    return out


def default_lags(freq: str, available_history: int | None = None):
    lags = DEFAULT_LAGS.get(freq, ())
    if available_history is not None:
        lags = tuple(lag for lag in lags if lag <= available_history)
    return tuple(lags)


MISSING_SCENARIOS = ("none", "rm", "bm-b", "bm-e")


def make_missing_mask(scenario: str, ratio: float, context_len: int, horizon: int, rng=None) -> np.ndarray:
    """Observed-timestep pattern of a context+horizon window.

    Returns a boolean array of length ``context_len + horizon``; ``True`` marks
    observed steps. ``floor(ratio * context_len)`` context steps are hidden
    at random (``rm``), at the start (``bm-b``) or at the end (``bm-e``) of the
    context. The horizon is never observed.
    """
    scenario = scenario.lower()
    if scenario not in MISSING_SCENARIOS:
        raise ParameterError(f"unknown missing-value scenario {scenario!r}")
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"ratio must be in [0, 1], got {ratio}")
    observed = np.zeros(context_len + horizon, dtype=bool)
    observed[:context_len] = True
    n_missing = 0 if scenario == "none" else int(math.floor(ratio * context_len))
    if n_missing == 0:
        return observed
    if scenario == "rm":
        if rng is None:
            raise ParameterError("random missingness needs an rng")
        observed[rng.choice(context_len, size=n_missing, replace=False)] = False
    elif scenario == "bm-b":
        observed[:n_missing] = False
    else:
        observed[context_len - n_missing : context_len] = False
    return observed


class WindowSampler:
    """Draws normalized training windows (with optional lag channels) from a dataset.

    A series is picked uniformly, then an offset uniformly among those that
    leave room for the window and its lag history. Series that are too short
    are skipped with a warning.
    """

    def __init__(self, dataset: Dataset, L: int, context_length: int | None = None, lags=()):
        self.L = L
        self.lags = tuple(lags)
        self.context_length = context_length if context_length is not None else L
        self.history = max(self.lags, default=0)
        self.series = []
        for s in dataset.series:
            if len(s) < L + self.history:
                log.warning("skipping series %s: length %d < %d", s.item_id, len(s), L + self.history)
                continue
            self.series.append(s)
        if not self.series:
            raise DataError(f"no series long enough for windows of length {L + self.history}")

    @property
    def channels(self):
        return 1 + len(self.lags)

    def window(self, series_idx: int, offset: int):
        s = self.series[series_idx]
        mat = build_lag_matrix(s.values, offset, self.L, self.lags)
        scale = mean_scale_factor(mat[: self.context_length, 0])
        return mat / scale, scale

    def sample(self, rng, n: int):
        out = np.empty((n, self.L, self.channels))
        ids = []
        for i in range(n):
            k = int(rng.integers(len(self.series)))
            s = self.series[k]
            offset = int(rng.integers(self.history, len(s) - self.L + 1))
            out[i], _ = self.window(k, offset)
            ids.append((s.item_id, offset))
        return out, ids

    def scales(self, rng, n: int) -> np.ndarray:
        """Scale factors of ``n`` random windows (empirical training-scale distribution)."""
        res = np.empty(n)
        for i in range(n):
            k = int(rng.integers(len(self.series)))
            s = self.series[k]
            offset = int(rng.integers(self.history, len(s) - self.L + 1))
            res[i] = mean_scale_factor(s.values[offset : offset + self.context_length])
        return res


SYNTH_KINDS = ("sine-mixture", "ar1", "seasonal-noise")


def synth_generate(kind: str, params: dict | None, n_series: int, length: int, seed: int, freq: str = "H") -> Dataset:
    """Deterministic toy datasets.

    ``sine-mixture``: level + sum_k amplitude_k sin(2 pi t / period_k + phase) + noise,
    phases drawn per series and component.
    ``ar1``: x_t = level + phi (x_{t-1} - level) + noise, started from stationarity.
    ``seasonal-noise``: one random periodic pattern shared by all series, plus noise.
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    noise_std = float(params.get("noise_std", 0.1))
    level = float(params.get("level", 0.0))
    series = []
    if kind == "sine-mixture":
        periods = params.get("periods", (24,))
        amplitudes = params.get("amplitudes", (1.0,) * len(periods))
        if len(amplitudes) != len(periods):
            raise ParameterError("need one amplitude per period")
        for i in range(n_series):
            phases = rng.uniform(0, 2 * np.pi, size=len(periods))
            y = np.full(length, level)
            for a, p, ph in zip(amplitudes, periods, phases):
                y = y + a * np.sin(2 * np.pi * t / p + ph)
            y = y + noise_std * rng.standard_normal(length)
            series.append(y)
    elif kind == "ar1":
        phi = float(params.get("phi", 0.5))
        if not -1 < phi < 1:
            raise ParameterError("ar1 coefficient must lie in (-1, 1)")
        for i in range(n_series):
            e = noise_std * rng.standard_normal(length)
            y = np.empty(length)
            y[0] = e[0] / math.sqrt(1 - phi**2)
            for k in range(1, length):
                y[k] = phi * y[k - 1] + e[k]
            series.append(y + level)
    elif kind == "seasonal-noise":
        period = int(params.get("period", 24))
        pattern = rng.standard_normal(period)
        for i in range(n_series):
            y = level + pattern[t % period] + noise_std * rng.standard_normal(length)
            series.append(y)
    else:
        raise ParameterError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    start = "2020-01-01 00:00:00"
    return Dataset([Series(f"{kind}-{i}", start, freq, y) for i, y in enumerate(series)])


def last_window(series: Series, L: int, lags=(), end: int | None = None) -> np.ndarray:
    """Raw (L, C) window ending at ``end`` (default: the series end)."""
    end = len(series) if end is None else end
    if end > len(series) or end - L < 0:
        raise ShapeError(f"series {series.item_id}: cannot take a window of {L} ending at {end}")
    return build_lag_matrix(series.values, end - L, L, lags)
