"""Command-line entry point: ``mtslstm <command> ...``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
divergence, 4 I/O error.

Run configuration (YAML, unknown keys rejected)::

    data_dir: data            # relative paths resolve against the config file
    output_dir: runs/mts
    basins: []                # empty or missing: every basin in data_dir
    model:
      kind: mts               # naive | smts | mts
      hidden_size: 64         # int or one per timescale
      dropout: 0.4
      forget_bias: 3.0
      static_features: all    # or a list of attribute columns
      timescales:             # coarsest first
        - {step_hours: 24, seq_len: 365, predict_window: 1}
        - {step_hours: 1, seq_len: 336, predict_window: 24, features: all}
    train:                    # fields of TrainConfig
      epochs: 30
      lr_schedule: [[1, 5.0e-4], [10, 1.0e-4], [25, 5.0e-5]]
      train_period: [2000-10-01, 2007-09-30]   # periods default to a 60/20/20
      ...                                      # split of whole hydrological years
    ensemble: 1
    benchmark: {batch_size: 8, repeats: 3, naive_seq_len: 4320}
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from . import metrics
from .checkpoint import CheckpointError
from .core import Workspace
from .dataset import DataError, Q_COLUMN, TIMESTAMP, format_timestamps, load_basins, read_csv, write_csv
from .loss import LossBatch, nse_reg_loss
from .model import MtsConfig, backward, build, forward
from .synth import write_fleet
from .timeseries import AlignmentError, RegularSeries, ScaleSpec, SequenceSpec, Timescale
from .train import (DEFAULT_SCHEDULE, DivergenceError, GridSpec, Period, TrainConfig, TrainedModel,
                    grid_search, observed, train_ensemble, train_run)

LOGGER = logging.getLogger("mtslstm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MODEL_KINDS = ("naive", "smts", "mts")
PRECIP = "total_precipitation"
PRED_META = "predictions.json"


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"data_dir", "output_dir", "basins", "model", "train", "ensemble", "benchmark"}
_MODEL_KEYS = {"kind", "hidden_size", "dropout", "forget_bias", "static_features", "timescales"}
_SCALE_KEYS = {"step_hours", "seq_len", "predict_window", "features"}
_TRAIN_KEYS = {"epochs", "batch_size", "lr_schedule", "seed", "clip_norm", "regularization",
               "regularization_weight", "epsilon", "precision", "validate_every", "max_loss",
               "train_period", "validation_period", "test_period"}
_BENCH_KEYS = {"batch_size", "repeats", "naive_seq_len"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class RunConfig:
    data_dir: Path
    output_dir: Path
    kind: str
    scales: List[dict]
    hidden: List[int]
    dropout: float = 0.4
    forget_bias: float = 3.0
    static_features: object = "all"
    basins: List[str] = field(default_factory=list)
    train: dict = field(default_factory=dict)
    ensemble: int = 1
    benchmark: dict = field(default_factory=dict)
    spec: SequenceSpec = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML ({err})") from err
        return cls.from_dict(raw or {}, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        _check_keys(raw, _TOP_KEYS, "run config")
        for key in ("data_dir", "model"):
            if key not in raw:
                raise ConfigError(f"run config needs '{key}'")
        model = raw["model"]
        _check_keys(model, _MODEL_KEYS, "model")
        kind = model.get("kind", "mts")
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {kind!r}")
        scales = model.get("timescales")
        if not scales:
            raise ConfigError("model.timescales must list at least one timescale")
        for k, s in enumerate(scales):
            _check_keys(s, _SCALE_KEYS, f"model.timescales[{k}]")
            for key in ("step_hours", "seq_len", "predict_window"):
                if key not in s:
                    raise ConfigError(f"model.timescales[{k}] needs '{key}'")
        try:
            spec = SequenceSpec(tuple(ScaleSpec(Timescale(int(s["step_hours"])), int(s["seq_len"]),
                                                int(s["predict_window"])) for s in scales))
        except AlignmentError as err:
            raise ConfigError(f"invalid timescale layout: {err}") from err
        except ValueError as err:
            raise ConfigError(f"invalid timescale layout: {err}") from err
        hidden = model.get("hidden_size", 64)
        hidden = [int(hidden)] * len(scales) if not isinstance(hidden, list) else [int(h) for h in hidden]
        if len(hidden) != len(scales):
            raise ConfigError("model.hidden_size needs one entry per timescale")
        train = raw.get("train", {}) or {}
        _check_keys(train, _TRAIN_KEYS, "train")
        bench = raw.get("benchmark", {}) or {}
        _check_keys(bench, _BENCH_KEYS, "benchmark")
        resolve = lambda p: (base / p) if not Path(p).is_absolute() else Path(p)
        return cls(resolve(raw["data_dir"]), resolve(raw.get("output_dir", "run")), kind, list(scales),
                   hidden, float(model.get("dropout", 0.4)), float(model.get("forget_bias", 3.0)),
                   model.get("static_features", "all"), list(raw.get("basins") or []), dict(train),
                   int(raw.get("ensemble", 1)), dict(bench), spec)

    def model_config(self, datasets) -> MtsConfig:
        first = datasets[0]
        features = []
        for s in self.scales:
            scale = Timescale(int(s["step_hours"]))
            first.ensure_scale(scale)
            names = s.get("features", "all")
            available = first.feature_names(scale)
            if names == "all":
                names = available
            missing = [n for n in names if n not in available]
            if missing:
                raise ConfigError(f"unknown feature(s) at {scale.name}: {', '.join(missing)}")
            features.append(tuple(names))
        static = self.static_features
        if static == "all":
            static = tuple(first.static)
        missing = [n for n in static if n not in first.static]
        if missing:
            raise ConfigError(f"unknown static attribute(s): {', '.join(missing)}")
        try:
            return MtsConfig(self.spec, tuple(features), tuple(self.hidden), tuple(static),
                             self.kind == "smts", self.dropout, self.forget_bias)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def train_config(self, datasets, seed: Optional[int] = None) -> TrainConfig:
        d = dict(self.train)
        defaults = default_periods(datasets)
        for key in ("train_period", "validation_period", "test_period"):
            d[key] = Period(*[str(x) for x in d[key]]) if key in d else defaults[key]
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(x) for x in d["lr_schedule"])
        if seed is not None:
            d["seed"] = seed
        try:
            return TrainConfig(**d)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid train block: {err}") from err


def default_periods(datasets) -> Dict[str, Period]:
    """Whole hydrological years split about 60/20/20 (train/validation/test)."""
    q = datasets[0].discharge[max(datasets[0].discharge, key=lambda s: s.step_hours)]
    start, end = q.start, q.end
    y0 = int(str(start)[:4]) + (1 if str(start)[5:10] > "10-01" else 0)
    first = np.datetime64(f"{y0:04d}-10-01")
    n_years = int((end.astype("datetime64[D]") - first).astype(int) // 365)
    if n_years < 3:
        raise ConfigError("data span too short for default periods; set them explicitly")
    n_train = max(1, int(0.6 * n_years))
    n_val = max(1, int(round(0.2 * n_years)))
    day = lambda y: f"{y:04d}-10-01"
    last = str((end - 1).astype("datetime64[D]"))
    return {
        "train_period": Period(day(y0), str(np.datetime64(day(y0 + n_train)) - 1)),
        "validation_period": Period(day(y0 + n_train), str(np.datetime64(day(y0 + n_train + n_val)) - 1)),
        "test_period": Period(day(y0 + n_train + n_val), last),
    }


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    write_fleet(Path(args.out), args.basins, seed, args.years)
    LOGGER.info("wrote %d basins to %s", args.basins, args.out)
    return EXIT_OK


def _load_run(args):
    run = RunConfig.load(args.config)
    if getattr(args, "model_kind", None):
        run.kind = args.model_kind
    datasets = load_basins(run.data_dir, run.basins or None)
    cfg = run.model_config(datasets)
    train = run.train_config(datasets, args.seed)
    return run, datasets, cfg, train


def cmd_train(args) -> int:
    run, datasets, cfg, train = _load_run(args)
    out = Path(args.out) if args.out else run.output_dir
    members = args.ensemble or run.ensemble
    if members > 1:
        dirs, _ = train_ensemble(members, train.seed, run.kind, train, cfg, datasets, out, jobs=args.jobs,
                                 data_dir=str(run.data_dir.resolve()))
        LOGGER.info("trained %d members under %s", len(dirs), out)
        return EXIT_OK
    model = train_run(run.kind, train, cfg, datasets)
    model.data_dir = str(run.data_dir.resolve())
    model.save(out)
    LOGGER.info("model written to %s", out)
    return EXIT_OK


def _model_dirs(path: Path) -> List[Path]:
    if (path / "model.json").exists():
        return [path]
    members = sorted(p for p in path.glob("member_*") if (p / "model.json").exists())
    if not members:
        raise FileNotFoundError(f"no model.json in {path} or its member_* directories")
    return members


def write_predictions(preds: Dict[str, Dict[Timescale, RegularSeries]], out: Path, meta: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for basin, per_scale in preds.items():
        for scale, series in per_scale.items():
            frame = pd.DataFrame({TIMESTAMP: format_timestamps(series.timestamps()),
                                  "qsim_mm_per_hour": series.values})
            write_csv(frame, out / scale.name / f"{basin}.csv")
    (out / PRED_META).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def cmd_predict(args) -> int:
    dirs = _model_dirs(Path(args.model))
    models = [TrainedModel.load(d) for d in dirs]
    data_dir = Path(args.data) if args.data else None
    if data_dir is None:
        if not models[0].data_dir:
            raise ConfigError("model does not record its data directory; pass --data")
        data_dir = Path(models[0].data_dir)
    period = Period(args.period[0], args.period[1])
    datasets = load_basins(data_dir, models[0].basins)
    member_preds = [m.predict(datasets, period) for m in models]
    preds = {}
    for d in datasets:
        preds[d.basin_id] = {}
        for s in member_preds[0][d.basin_id]:
            vals = np.mean(np.stack([m[d.basin_id][s].values for m in member_preds]), axis=0)
            preds[d.basin_id][s] = RegularSeries(period.start_hour, s, vals)
    write_predictions(preds, Path(args.out), {"kind": models[0].kind, "members": len(models),
                                              "period": [period.start, period.end]})
    return EXIT_OK


def _read_pred(path: Path, scale: Timescale) -> RegularSeries:
    frame = read_csv(path)
    stamps = pd.to_datetime(frame[TIMESTAMP], utc=True).dt.tz_localize(None).to_numpy().astype("datetime64[h]")
    return RegularSeries(stamps[0], scale, frame["qsim_mm_per_hour"].to_numpy(np.float64))


def evaluate_predictions(pred_dir: Path, data_dir: Path) -> pd.DataFrame:
    """Long-format report: one row per basin and timescale plus summary rows."""
    pred_dir = Path(pred_dir)
    meta = json.loads((pred_dir / PRED_META).read_text())
    period = Period(*meta["period"])
    kind = meta.get("kind", "model")
    scales = sorted((Timescale.parse(p.name) for p in pred_dir.iterdir() if p.is_dir()),
                    key=lambda s: -s.step_hours)
    basins = sorted({p.stem for s in scales for p in (pred_dir / s.name).glob("*.csv")})
    datasets = {d.basin_id: d for d in load_basins(data_dir, basins)}
    rows, obs_sig, sim_sig = [], {}, {}
    for basin in basins:
        d = datasets[basin]
        sims = {s: _read_pred(pred_dir / s.name / f"{basin}.csv", s) for s in scales}
        for k, s in enumerate(scales):
            d.ensure_scale(s)
            obs = observed(d, s, period)
            sim = sims[s]
            precip = None
            if PRECIP in d.forcings.get(s, {}):
                f = d.forcings[s][PRECIP]
                precip = RegularSeries(period.start_hour, s, observed_like(f, s, period))
            row = {"basin": basin, "timescale": s.name, "model": kind}
            row.update(metrics.metric_report(obs.values, sim.values, s))
            coarser = [c for c in scales[:k] if c.step_hours % s.step_hours == 0]
            row["consistency_rmsd"] = metrics.consistency_rmsd(sims[coarser[-1]], sim) if coarser else float("nan")
            so = metrics.signatures(obs, precip)
            ss = metrics.signatures(sim, precip)
            row.update({f"obs_{n}": v for n, v in so.items()})
            row.update({f"sim_{n}": v for n, v in ss.items()})
            obs_sig.setdefault(s.name, []).append(so)
            sim_sig.setdefault(s.name, []).append(ss)
            rows.append(row)
    frame = metrics.report_frame(rows)
    corr_rows = []
    for s in scales:
        r = metrics.signature_correlation(obs_sig.get(s.name, []), sim_sig.get(s.name, []))
        corr_rows.append({"basin": "signature_pearson_r", "timescale": s.name, "model": kind,
                          **{f"sim_{n}": v for n, v in r.items()}})
    return pd.concat([frame, pd.DataFrame(corr_rows)], ignore_index=True)


def observed_like(series: RegularSeries, scale: Timescale, period: Period) -> np.ndarray:
    from .train import period_series

    return period_series(series.values, series.start, scale, period).values


def cmd_evaluate(args) -> int:
    frame = evaluate_predictions(Path(args.pred), Path(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, lineterminator="\n", na_rep="")
    return EXIT_OK


def load_grid(path) -> GridSpec:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    allowed = {"regularization", "hidden_size", "fine_seq_len", "dropout", "lr_schedule", "batch_size", "seeds"}
    _check_keys(raw, allowed, "grid")
    kw = {}
    for k, v in raw.items():
        if k == "seeds":
            kw[k] = int(v)
        elif k == "lr_schedule":
            kw[k] = tuple(tuple(tuple(x) for x in sched) for sched in v)
        else:
            kw[k] = tuple(v)
    try:
        return GridSpec(**kw)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def cmd_gridsearch(args) -> int:
    run, datasets, cfg, train = _load_run(args)
    grid = load_grid(args.grid)
    ranked = grid_search(grid, run.kind, cfg, train, datasets, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([{**r, "lr_schedule": json.dumps([list(x) for x in r["lr_schedule"]])} for r in ranked])
    frame.sort_values(["stage"], kind="stable").to_csv(out / "cells.csv", index=False, lineterminator="\n", na_rep="")
    frame.insert(0, "rank", range(1, len(frame) + 1))
    frame.to_csv(out / "ranking.csv", index=False, lineterminator="\n", na_rep="")
    return EXIT_OK


def benchmark(hidden: int, n_features: int, batch_size: int = 8, repeats: int = 3,
              naive_seq_len: int = 4320, seed: int = 0) -> dict:
    """Forward+backward seconds per sample for the naive hourly and daily+hourly layouts."""
    layouts = {
        "naive": SequenceSpec.from_tuples([(1, naive_seq_len, 24)]),
        "mts": SequenceSpec.from_tuples([(24, 365, 1), (1, 336, 24)]),
    }
    rng = np.random.default_rng(seed)
    out = {}
    for name, spec in layouts.items():
        feats = tuple(tuple(f"f{i}" for i in range(n_features)) for _ in spec)
        cfg = MtsConfig(spec, feats, (hidden,) * len(spec))
        params = build(cfg, seed)
        inputs = [rng.standard_normal((s.seq_len, batch_size, n_features)) for s in spec]
        ws = Workspace()
        preds, tape = forward(params, cfg, inputs, workspace=ws)
        shapes = [p.shape for p in preds]
        if shapes != [(batch_size, s.predict_window) for s in spec]:
            raise RuntimeError(f"{name}: unexpected output shapes {shapes}")
        targets = [np.zeros_like(p) for p in preds]
        ratios = tuple(a.scale.ratio_to(b.scale) for a, b in zip(spec, spec[1:]))
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            preds, tape = forward(params, cfg, inputs, workspace=ws)
            _, d = nse_reg_loss(LossBatch(preds, targets, np.ones(batch_size), ratios))
            backward(params, cfg, tape, d, ws)
            best = min(best, time.perf_counter() - t0)
        out[name] = {"steps": spec.total_steps, "seconds_per_sample": best / batch_size}
    out["step_ratio"] = out["naive"]["steps"] / out["mts"]["steps"]
    out["speedup"] = out["naive"]["seconds_per_sample"] / out["mts"]["seconds_per_sample"]
    return out


def cmd_benchmark(args) -> int:
    run = RunConfig.load(args.config)
    bench = run.benchmark
    n_features = 11
    try:
        datasets = load_basins(run.data_dir, run.basins[:1] or None)[:1]
        cfg = run.model_config(datasets)
        n_features = cfg.input_size(len(cfg.spec) - 1)
    except (OSError, DataError):
        LOGGER.warning("data not readable; benchmarking with %d synthetic features", n_features)
    res = benchmark(run.hidden[0], n_features, int(bench.get("batch_size", args.batch_size)),
                    int(bench.get("repeats", 3)), int(bench.get("naive_seq_len", 4320)),
                    args.seed or 0)
    print(f"naive hourly: {res['naive']['steps']} steps, {res['naive']['seconds_per_sample'] * 1e3:.1f} ms/sample")
    print(f"daily+hourly: {res['mts']['steps']} steps, {res['mts']['seconds_per_sample'] * 1e3:.1f} ms/sample")
    print(f"step-count ratio: {res['step_ratio']:.2f}")
    print(f"measured speedup: {res['speedup']:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtslstm", description="Multi-timescale LSTM rainfall-runoff models")
    parser.add_argument("--seed", type=int, default=None, help="override every seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel members / grid cells")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    # accepted after the command name too
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic basin fleet")
    p.add_argument("--basins", type=int, default=10)
    p.add_argument("--years", type=int, default=12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--model-kind", choices=MODEL_KINDS)
    p.add_argument("--out")
    p.add_argument("--ensemble", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write prediction CSVs for a period")
    p.add_argument("--model", required=True)
    p.add_argument("--period", nargs=2, metavar=("START", "END"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="data directory (defaults to the one used in training)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="metrics and signatures of a prediction directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", parents=[common], help="two-stage hyperparameter search")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-kind", choices=MODEL_KINDS)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("benchmark", parents=[common], help="time naive hourly vs daily+hourly layouts")
    p.add_argument("--config", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as err:
        LOGGER.error("training diverged: %s", err)
        return EXIT_DIVERGED
    except (OSError, DataError, CheckpointError) as err:
        LOGGER.error("I/O error: %s", err)
        return EXIT_IO
    except (ConfigError, ValueError) as err:
        LOGGER.error("configuration error: %s", err)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
