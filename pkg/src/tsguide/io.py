"""Versioned line-oriented file formats for forecasts, synthetic samples, reports and loss histories.

Every file starts with a one-line JSON header ``{"format": "<name>", "version": N, ...}``
carrying the resolved run configuration; the remaining lines are JSON records.
Floats are written with ``repr`` precision, so a read/write round trip is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError

FORMAT_VERSION = 1
FORECAST_FORMAT = "tsguide-forecast"
SAMPLES_FORMAT = "tsguide-samples"
REPORT_FORMAT = "tsguide-report"
HISTORY_FORMAT = "tsguide-loss-history"


class FormatError(ParameterError):
    pass


def _nan_to_none(values):
    return [None if (v is None or (isinstance(v, float) and math.isnan(v))) else v for v in values]


def _none_to_nan(values):
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


def write_lines(path, fmt: str, header: dict, records) -> None:
    head = {"format": fmt, "version": FORMAT_VERSION, **header}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_lines(path, fmt: str):
    """Return ``(header, records)`` after checking the format tag and version."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise FormatError(f"{path}: line 1 is not a format header") from None
        if not isinstance(header, dict) or header.get("format") != fmt:
            raise FormatError(f"{path}: expected format {fmt!r}, found {header.get('format') if isinstance(header, dict) else None!r}")
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported {fmt} version {header.get('version')}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return header, records


@dataclass
class ForecastRecord:
    """Sample paths for the steps ``[start, end)`` of one series.

    ``history`` holds the raw series values from ``history_start`` up to
    ``start`` (NaN where hidden by a missing-value scenario); ``observed``
    marks the observed steps of the model window ``[window_start, end)``.
    """

    item_id: str
    start: int
    end: int
    samples: np.ndarray
    history: np.ndarray
    history_start: int
    window_start: int
    observed: np.ndarray
    scale: float = 1.0
    quantiles: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.end - self.start

    @property
    def context(self):
        """Raw values of the window's context part (NaN where unobserved)."""
        return self.history[self.window_start - self.history_start :]

    def to_json(self, levels):
        from .metrics import empirical_quantiles

        q = self.quantiles if self.quantiles is not None else empirical_quantiles(self.samples, levels)
        return {
            "item_id": self.item_id,
            "start": int(self.start),
            "end": int(self.end),
            "window_start": int(self.window_start),
            "history_start": int(self.history_start),
            "history": _nan_to_none(np.asarray(self.history, dtype=float).tolist()),
            "observed": [bool(b) for b in self.observed],
            "scale": float(self.scale),
            "samples": np.asarray(self.samples, dtype=float).tolist(),
            "quantiles": np.asarray(q, dtype=float).tolist(),
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, rec, where=""):
        try:
            samples = np.asarray(rec["samples"], dtype=np.float64)
            if samples.ndim != 2 or samples.shape[1] != rec["end"] - rec["start"]:
                raise FormatError(f"{where}: samples must be (N, end - start)")
            return cls(
                item_id=str(rec["item_id"]),
                start=int(rec["start"]),
                end=int(rec["end"]),
                samples=samples,
                history=_none_to_nan(rec["history"]),
                history_start=int(rec["history_start"]),
                window_start=int(rec["window_start"]),
                observed=np.asarray(rec["observed"], dtype=bool),
                scale=float(rec.get("scale", 1.0)),
                quantiles=np.asarray(rec["quantiles"], dtype=np.float64) if "quantiles" in rec else None,
                extra=rec.get("extra", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{where}: malformed forecast record ({exc})") from None


def write_forecasts(path, records, config: dict) -> None:
    from .metrics import QUANTILE_LEVELS

    levels = [float(k) for k in QUANTILE_LEVELS]
    write_lines(path, FORECAST_FORMAT, {"config": config, "quantile_levels": levels}, (r.to_json(levels) for r in records))


def read_forecasts(path):
    header, raw = read_lines(path, FORECAST_FORMAT)
    return header, [ForecastRecord.from_json(rec, f"{path}:{i + 2}") for i, rec in enumerate(raw)]


def write_samples(path, samples, scales, config: dict) -> None:
    """Synthetic windows (M, L) in original units plus the scale each was de-normalized with."""
    samples = np.asarray(samples, dtype=np.float64).reshape(len(scales), -1) if len(scales) else np.zeros((0, 0))
    records = ({"index": i, "scale": float(s), "values": row.tolist()} for i, (s, row) in enumerate(zip(scales, samples)))
    write_lines(path, SAMPLES_FORMAT, {"config": config, "n_samples": len(scales)}, records)


def read_samples(path):
    header, raw = read_lines(path, SAMPLES_FORMAT)
    if not raw:
        return header, np.zeros((0, 0)), np.zeros(0)
    return header, np.array([r["values"] for r in raw], dtype=np.float64), np.array([r["scale"] for r in raw])


def write_report(path, report: dict, config: dict) -> None:
    write_lines(path, REPORT_FORMAT, {"config": config}, [report])


def read_report(path):
    header, raw = read_lines(path, REPORT_FORMAT)
    if len(raw) != 1:
        raise FormatError(f"{path}: a report holds exactly one record")
    return header, raw[0]


def write_history(path, history, config: dict) -> None:
    write_lines(path, HISTORY_FORMAT, {"config": config}, ({"epoch": i, "loss": float(v)} for i, v in enumerate(history)))


def read_history(path):
    header, raw = read_lines(path, HISTORY_FORMAT)
    return header, [r["loss"] for r in raw]
