"""Command line: ``tsguide {train,forecast,refine,synthesize,evaluate,baseline}``.

Settings come from built-in defaults, then an INI file (``--config``), then
``--set section.key=value`` overrides, then the dedicated flags of each
command. The fully resolved settings are written into every output file.

Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration error.
The thread count of the BLAS pool is taken from ``TSGUIDE_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, load_jsonl, synth_generate
from .denoiser import DenoiserConfig
from .errors import NumericError, ParameterError
from .guidance import GuidanceConfig
from .io import FormatError, read_forecasts, read_samples, write_forecasts, write_history, write_report, write_samples
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    WindowSpec,
    baseline_forecast,
    evaluate_forecasts,
    evaluate_samples,
    guided_forecast,
    refine_forecasts,
    spec_of,
    synthesize,
    train_model,
    tune_guidance_scale,
)
from .refine import RefinementConfig
from .training import TrainConfig

log = logging.getLogger("tsguide")

THREADS_ENV = "TSGUIDE_NUM_THREADS"

DEFAULTS = {
    "data": {"path": "", "context_length": "", "prediction_length": "", "lags": "none", "holdout": "yes"},
    "model": {"residual_layers": "3", "channels": "64", "time_emb_dim": "128", "skip_input_to_output": "no"},
    "schedule": {"T": "100", "beta_1": "1e-4", "beta_T": "0.1"},
    "train": {
        "learning_rate": "1e-3",
        "batch_size": "64",
        "epochs": "1000",
        "batches_per_epoch": "128",
        "grad_clip_threshold": "0.5",
        "seed": "0",
    },
    "forecast": {"variant": "quantile", "scale": "", "samples": "100", "missing": "none", "ratio": "0.0", "guide_lags": "yes", "seed": "0"},
    "refine": {
        "variant": "lmc",
        "regularizer": "q",
        "eta": "0.05",
        "gamma": "1.0",
        "lam": "1.0",
        "iterations": "20",
        "tau": "",
        "samples": "100",
        "fresh_eps_per_iter": "yes",
        "seed": "0",
    },
    "synthesize": {"samples": "10000", "seed": "0"},
    "evaluate": {"metric": "crps", "context_length": "", "prediction_length": ""},
    "baseline": {"method": "seasonal-naive", "season": "24", "seed": "0"},
    "synthetic": {"kind": "", "n_series": "64", "length": "576", "seed": "0", "params": ""},
}


class ConfigError(ParameterError):
    pass


class Settings:
    """Typed access to the resolved ``section.key`` values (all stored as strings)."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    def raw(self, key: str) -> str:
        section, _, name = key.partition(".")
        try:
            return self.parser.get(section, name)
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"unknown setting {key!r}") from None

    def _typed(self, key, fn, kind, optional):
        value = self.raw(key).strip()
        if value == "":
            if optional:
                return None
            raise ConfigError(f"setting {key} is required")
        try:
            return fn(value)
        except ValueError:
            raise ConfigError(f"setting {key} must be {kind}, got {value!r}") from None

    def str(self, key, optional=False):
        return self._typed(key, str, "a string", optional)

    def int(self, key, optional=False):
        return self._typed(key, int, "an integer", optional)

    def float(self, key, optional=False):
        return self._typed(key, float, "a number", optional)

    def bool(self, key):
        value = self.raw(key).strip().lower()
        if value in ("1", "yes", "true", "on"):
            return True
        if value in ("0", "no", "false", "off"):
            return False
        raise ConfigError(f"setting {key} must be yes/no, got {value!r}")

    def set(self, key, value):
        section, _, name = key.partition(".")
        if not self.parser.has_section(section) or not self.parser.has_option(section, name):
            raise ConfigError(f"unknown setting {key!r}")
        self.parser.set(section, name, str(value))

    def as_dict(self):
        return {s: dict(self.parser.items(s)) for s in self.parser.sections()}


def load_settings(config_path=None, overrides=()) -> Settings:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_dict(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        extra = configparser.ConfigParser(interpolation=None)
        extra.optionxform = str
        try:
            extra.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        settings = Settings(parser)
        for section in extra.sections():
            for key, value in extra.items(section):
                settings.set(f"{section}.{key}", value)
    settings = Settings(parser)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        settings.set(key.strip(), value.strip())
    return settings


def parse_lags(text: str, freq: str | None):
    from .data import default_lags

    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    if text == "default":
        return default_lags(freq or "H")
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"data.lags must be 'none', 'default' or a list of integers, got {text!r}") from None


def _synthetic_dataset(st: Settings) -> Dataset:
    import json

    params_text = st.raw("synthetic.params").strip()
    try:
        params = json.loads(params_text) if params_text else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"synthetic.params must be a JSON object ({exc.msg})") from None
    return synth_generate(st.str("synthetic.kind"), params, st.int("synthetic.n_series"), st.int("synthetic.length"), st.int("synthetic.seed"))


def load_dataset(st: Settings, path=None) -> Dataset:
    """Dataset from ``path`` / data.path, or the generator in [synthetic] when data.path is 'synthetic'."""
    path = path or st.str("data.path", optional=True)
    if not path:
        raise ConfigError("setting data.path is required (a JSON-lines file or directory, or 'synthetic')")
    if path == "synthetic":
        ds = _synthetic_dataset(st)
    else:
        if not Path(path).exists():
            raise ConfigError(f"data.path: {path} does not exist")
        ds = load_jsonl(path)
    ctx, h = ds.lengths()
    ds.context_length = st.int("data.context_length", optional=True) or ctx
    ds.prediction_length = st.int("data.prediction_length", optional=True) or h
    return ds


def _window_spec(st: Settings, ds: Dataset) -> WindowSpec:
    return WindowSpec(ds.context_length, ds.prediction_length, parse_lags(st.raw("data.lags"), ds.freq))


def cmd_train(args, st: Settings) -> int:
    ds = load_dataset(st, args.dataset)
    spec = _window_spec(st, ds)
    train_ds = ds.drop_tail(spec.horizon) if st.bool("data.holdout") else ds
    dcfg = DenoiserConfig(
        L=spec.L,
        C=1 + len(spec.lags),
        residual_layers=st.int("model.residual_layers"),
        channels=st.int("model.channels"),
        time_emb_dim=st.int("model.time_emb_dim"),
        skip_input_to_output=st.bool("model.skip_input_to_output"),
    )
    tcfg = TrainConfig(
        learning_rate=st.float("train.learning_rate"),
        batch_size=st.int("train.batch_size"),
        epochs=st.int("train.epochs"),
        batches_per_epoch=st.int("train.batches_per_epoch"),
        grad_clip_threshold=st.float("train.grad_clip_threshold"),
        seed=st.int("train.seed"),
    )
    schedule = (st.int("schedule.T"), st.float("schedule.beta_1"), st.float("schedule.beta_T"))

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.5f", epoch + 1, tcfg.epochs, loss)

    model, history = train_model(train_ds, spec, dcfg, tcfg, schedule, progress)
    model.metadata["config"] = st.as_dict()
    save_checkpoint(model, args.output)
    write_history(args.history or f"{args.output}.history.jsonl", history, st.as_dict())
    log.info("wrote %s (representative step %d)", args.output, model.metadata["representative_step"])
    return 0


def cmd_forecast(args, st: Settings) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = spec_of(model)
    st.set("data.context_length", spec.context_length)
    st.set("data.prediction_length", spec.horizon)
    ds = load_dataset(st, args.dataset)
    variant = st.str("forecast.variant")
    if st.raw("forecast.scale").strip().lower() == "auto":
        scale, scores = tune_guidance_scale(model, ds, variant, seed=st.int("forecast.seed"))
        log.info("validation CRPS by scale: %s", scores)
    else:
        scale = st.float("forecast.scale", optional=True)
    cfg = GuidanceConfig(variant, scale)
    records = guided_forecast(
        model,
        ds,
        cfg,
        n_samples=st.int("forecast.samples"),
        seed=st.int("forecast.seed"),
        missing=st.str("forecast.missing"),
        ratio=st.float("forecast.ratio"),
        holdout=st.bool("data.holdout"),
        guide_lags=st.bool("forecast.guide_lags"),
    )
    config = st.as_dict()
    config["forecast"]["scale"] = str(cfg.scale)
    write_forecasts(args.output, records, {**config, "checkpoint": str(args.checkpoint)})
    return 0


def cmd_refine(args, st: Settings) -> int:
    model = load_checkpoint(args.checkpoint)
    header, records = read_forecasts(args.base)
    tau = st.int("refine.tau", optional=True) or model.metadata.get("representative_step")
    cfg = RefinementConfig(
        variant=st.str("refine.variant"),
        regularizer=st.str("refine.regularizer"),
        eta=st.float("refine.eta"),
        gamma=st.float("refine.gamma"),
        lam=st.float("refine.lam"),
        iterations=st.int("refine.iterations"),
        tau=tau,
        fresh_eps_per_iter=st.bool("refine.fresh_eps_per_iter"),
    )
    out = refine_forecasts(model, records, cfg, n_paths=st.int("refine.samples"), seed=st.int("refine.seed"))
    config = st.as_dict()
    config["refine"]["tau"] = str(tau)
    write_forecasts(args.output, out, {**config, "checkpoint": str(args.checkpoint), "base": header.get("config")})
    return 0


def cmd_synthesize(args, st: Settings) -> int:
    model = load_checkpoint(args.checkpoint)
    samples, scales = synthesize(model, st.int("synthesize.samples"), seed=st.int("synthesize.seed"))
    write_samples(args.output, samples, scales, {**st.as_dict(), "checkpoint": str(args.checkpoint)})
    return 0


def cmd_evaluate(args, st: Settings) -> int:
    ds = load_dataset(st, args.dataset)
    metric = st.str("evaluate.metric")
    if metric == "crps":
        _, records = read_forecasts(args.input)
        report = evaluate_forecasts(records, ds)
    elif metric == "lps":
        header, samples, _ = read_samples(args.input)
        if len(samples) == 0:
            raise DataError(f"{args.input}: no synthetic samples to score")
        ctx = st.int("evaluate.context_length", optional=True) or ds.context_length
        h = st.int("evaluate.prediction_length", optional=True) or ds.prediction_length
        report = evaluate_samples(samples, ds, ctx, h)
    else:
        raise ConfigError(f"evaluate.metric must be 'crps' or 'lps', got {metric!r}")
    write_report(args.output, report, {**st.as_dict(), "input": str(args.input)})
    print(f"{report['metric']} {report['aggregate']:.6f}")
    return 0


def cmd_baseline(args, st: Settings) -> int:
    ds = load_dataset(st, args.dataset)
    spec = WindowSpec(ds.context_length, ds.prediction_length)
    method = st.str("baseline.method")
    train_windows = None
    if method == "linear":
        from .pipeline import test_windows

        train_ds = ds.drop_tail(spec.horizon)
        train_windows = np.concatenate([
            np.lib.stride_tricks.sliding_window_view(s.values, spec.L) for s in train_ds if len(s) >= spec.L
        ])
    records = baseline_forecast(ds, spec, method, st.int("baseline.season"), train_windows, st.bool("data.holdout"))
    write_forecasts(args.output, records, st.as_dict())
    return 0


FLAG_KEYS = {
    "train": {"epochs": "train.epochs", "seed": "train.seed"},
    "forecast": {"variant": "forecast.variant", "scale": "forecast.scale", "samples": "forecast.samples",
                 "missing": "forecast.missing", "ratio": "forecast.ratio", "seed": "forecast.seed"},
    "refine": {"variant": "refine.variant", "regularizer": "refine.regularizer", "iters": "refine.iterations",
               "eta": "refine.eta", "gamma": "refine.gamma", "lam": "refine.lam", "tau": "refine.tau",
               "samples": "refine.samples", "seed": "refine.seed"},
    "synthesize": {"samples": "synthesize.samples", "seed": "synthesize.seed"},
    "evaluate": {"metric": "evaluate.metric"},
    "baseline": {"method": "baseline.method", "season": "baseline.season"},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsguide", description="Diffusion-based time-series forecasting, refinement and generation.")
    p.add_argument("--config", help="INI settings file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one setting")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the denoiser and write a checkpoint")
    t.add_argument("--dataset", help="JSON-lines file/directory (overrides data.path)")
    t.add_argument("--output", "-o", required=True)
    t.add_argument("--history", help="loss-history file (default: <output>.history.jsonl)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    f = sub.add_parser("forecast", help="self-guided probabilistic forecasts")
    f.add_argument("checkpoint")
    f.add_argument("dataset", nargs="?")
    f.add_argument("--output", "-o", required=True)
    f.add_argument("--variant", choices=["ms", "q", "quantile", "mean-square"])
    f.add_argument("--scale", help="guidance scale, or 'auto' to pick from {1, 2, 4, 8} on the validation window")
    f.add_argument("--samples", type=int)
    f.add_argument("--missing", choices=["none", "rm", "bm-b", "bm-e"])
    f.add_argument("--ratio", type=float)
    f.add_argument("--seed", type=int)

    r = sub.add_parser("refine", help="energy-based refinement of a forecast file")
    r.add_argument("checkpoint")
    r.add_argument("base")
    r.add_argument("--output", "-o", required=True)
    r.add_argument("--variant", choices=["lmc", "ml"])
    r.add_argument("--regularizer", choices=["ms", "q"])
    r.add_argument("--iters", type=int)
    r.add_argument("--eta", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--lam", type=float)
    r.add_argument("--tau", type=int)
    r.add_argument("--samples", type=int)
    r.add_argument("--seed", type=int)

    s = sub.add_parser("synthesize", help="unconditional samples")
    s.add_argument("checkpoint")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)

    e = sub.add_parser("evaluate", help="CRPS of a forecast file or LPS of a samples file")
    e.add_argument("input")
    e.add_argument("dataset", nargs="?")
    e.add_argument("--output", "-o", required=True)
    e.add_argument("--metric", choices=["crps", "lps"])

    b = sub.add_parser("baseline", help="Seasonal Naive / Linear point forecasts")
    b.add_argument("dataset", nargs="?")
    b.add_argument("--output", "-o", required=True)
    b.add_argument("--method", choices=["seasonal-naive", "linear"])
    b.add_argument("--season", type=int)
    return p


COMMANDS = {
    "train": cmd_train,
    "forecast": cmd_forecast,
    "refine": cmd_refine,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
}


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        st = load_settings(args.config, args.set)
        for flag, key in FLAG_KEYS[args.command].items():
            value = getattr(args, flag, None)
            if value is not None:
                st.set(key, value)
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](args, st)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (DataError, FormatError, NumericError) as exc:
        print(f"tsguide: error: {exc}", file=sys.stderr)
        return 1
    except (ParameterError, FileNotFoundError) as exc:
        print(f"tsguide: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"tsguide: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
