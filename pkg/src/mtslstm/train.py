"""Training loop, prediction, ensembles and the two-stage grid search.

One training sample is a (basin, anchor) pair. The anchor is a boundary of the
coarsest timescale; every branch's input window ends there and its targets are
the last ``predict_window`` steps before it. Anchors step through a period with
a stride of one coarse step, and an anchor belongs to a period only if all of
its targets fall inside the period.

Random streams: the sample order uses ``default_rng([seed, 0])`` and dropout
masks ``default_rng([seed, 1])``; weights are built from ``seed``. Given the
seed and the BLAS thread count, a run is bitwise reproducible.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .core import Workspace
from .dataset import BasinDataset
from .loss import LossBatch, nse_reg_loss
from .model import MtsConfig, MtsModelParams, PredictionBundle, backward, build, forward
from .timeseries import RegularSeries, StandardizationStats, Timescale, floored_std

LOGGER = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((1, 5e-4), (10, 1e-4), (25, 5e-5))


class DivergenceError(RuntimeError):
    """Loss became non-finite or exceeded ``max_loss``."""


@dataclass(frozen=True)
class Period:
    """Inclusive range of calendar days."""

    start: str
    end: str

    @property
    def start_hour(self) -> np.datetime64:
        return np.datetime64(self.start, "D").astype("datetime64[h]")

    @property
    def end_hour(self) -> np.datetime64:
        """Exclusive end: midnight after the last day."""
        return (np.datetime64(self.end, "D") + 1).astype("datetime64[h]")

    def __post_init__(self):
        if self.end_hour <= self.start_hour:
            raise ValueError(f"period {self.start}..{self.end} is empty")


@dataclass(frozen=True)
class TrainConfig:
    train_period: Period
    validation_period: Period
    test_period: Period
    epochs: int = 30
    batch_size: int = 256
    lr_schedule: Tuple[Tuple[int, float], ...] = DEFAULT_SCHEDULE
    seed: int = 0
    clip_norm: float = 1.0
    regularization: bool = True
    regularization_weight: float = 1.0
    epsilon: float = 0.1
    precision: str = "float64"
    validate_every: int = 1
    max_loss: float = 1e6

    def __post_init__(self):
        sched = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched or sched[0][0] != 1:
            raise ValueError("lr_schedule must start at epoch 1")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if any(r < 0 for _, r in sched):
            raise ValueError("learning rates must be non-negative")
        p = (self.train_period, self.validation_period, self.test_period)
        if not (p[0].end_hour <= p[1].start_hour and p[1].end_hour <= p[2].start_hour):
            raise ValueError("periods must be disjoint and ordered train < validation < test")
        if self.epochs < 1 or self.batch_size < 1 or self.validate_every < 1:
            raise ValueError("epochs, batch_size and validate_every must be positive")
        if self.clip_norm <= 0 or self.epsilon <= 0:
            raise ValueError("clip_norm and epsilon must be positive")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        for k in ("train_period", "validation_period", "test_period"):
            d[k] = [d[k]["start"], d[k]["end"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("train_period", "validation_period", "test_period"):
            d[k] = Period(*d[k])
        d["lr_schedule"] = tuple(tuple(x) for x in d["lr_schedule"])
        return cls(**d)


def lr_at(schedule: Sequence[Tuple[int, float]], epoch: int) -> float:
    """Rate of the last schedule entry whose start epoch is at most ``epoch``."""
    if epoch < 1:
        raise ValueError("epochs count from 1")
    rate = schedule[0][1]
    for start, r in schedule:
        if start <= epoch:
            rate = r
    return float(rate)


# --- data preparation -------------------------------------------------------

def _feature_key(scale: Timescale, name: str) -> str:
    return f"{scale.name}:{name}"


def fit_stats(datasets: Sequence[BasinDataset], config: MtsConfig, period: Period) -> StandardizationStats:
    """Feature moments, discharge scale and per-basin discharge std over ``period``.

    Discharge uses the finest timescale pooled over basins; static attributes
    are standardized across basins.
    """
    stats = StandardizationStats()
    for d in datasets:
        for sspec in config.spec:
            d.ensure_scale(sspec.scale)
    for sspec, names in zip(config.spec, config.features):
        for name in names:
            cols = [_period_values(d.forcings[sspec.scale][name], period) for d in datasets]
            col = np.concatenate(cols)
            stats.feature_mean[_feature_key(sspec.scale, name)] = float(np.nanmean(col))
            stats.feature_std[_feature_key(sspec.scale, name)] = floored_std(col)
    for name in config.static_features:
        col = np.array([d.static[name] for d in datasets])
        stats.feature_mean["static:" + name] = float(col.mean())
        stats.feature_std["static:" + name] = floored_std(col)
    finest = config.spec[len(config.spec) - 1].scale
    qs = [_period_values(d.discharge[finest], period) for d in datasets]
    pooled = np.concatenate(qs)
    stats.q_mean = float(np.nanmean(pooled))
    stats.q_std = floored_std(pooled)
    stats.basin_q_std = {d.basin_id: floored_std(q) for d, q in zip(datasets, qs)}
    return stats


def _period_values(series: RegularSeries, period: Period) -> np.ndarray:
    i = max(0, int((period.start_hour - series.start) / series.scale.step))
    j = min(len(series), int((period.end_hour - series.start) / series.scale.step))
    return series.values[i:j]


@dataclass
class BasinArrays:
    """Standardized model-ready arrays of one basin."""

    basin_id: str
    start: Dict[Timescale, np.datetime64]
    features: List[np.ndarray]  # per branch (n_steps, F)
    targets: List[np.ndarray]  # per branch, standardized discharge (n_steps,)
    static: np.ndarray  # (S,)
    sigma: float  # basin discharge std in standardized units


def prepare(datasets: Sequence[BasinDataset], config: MtsConfig, stats: StandardizationStats,
            dtype=np.float64) -> List[BasinArrays]:
    out = []
    for d in datasets:
        feats, targs, starts = [], [], {}
        for sspec, names in zip(config.spec, config.features):
            s = sspec.scale
            d.ensure_scale(s)
            cols = [(d.forcings[s][n].values - stats.feature_mean[_feature_key(s, n)])
                    / stats.feature_std[_feature_key(s, n)] for n in names]
            n_steps = len(d.discharge[s])
            feats.append(np.ascontiguousarray(np.column_stack(cols) if cols else np.zeros((n_steps, 0)),
                                              dtype=dtype))
            targs.append((d.discharge[s].values - stats.q_mean) / stats.q_std)
            starts[s] = d.discharge[s].start
            if d.forcings[s] and next(iter(d.forcings[s].values())).start != starts[s]:
                raise ValueError(f"basin {d.basin_id}: forcing and discharge grids differ at {s.name}")
        static = np.array([(d.static[n] - stats.feature_mean["static:" + n]) / stats.feature_std["static:" + n]
                           for n in config.static_features], dtype=dtype)
        sigma = stats.basin_q_std[d.basin_id] / stats.q_std if d.basin_id in stats.basin_q_std else 1.0
        out.append(BasinArrays(d.basin_id, starts, feats, targs, static, sigma))
    return out


class Sampler:
    """Anchors and batch assembly over prepared basins."""

    def __init__(self, config: MtsConfig, basins: Sequence[BasinArrays], dtype=np.float64):
        self.config = config
        self.basins = list(basins)
        self.dtype = np.dtype(dtype)
        self.anchor_scale = config.anchor_scale
        self.coarse_step = self.anchor_scale.step
        self.target_span = max(s.predict_window * s.scale.step_hours for s in config.spec)

    def anchors(self, basin: int, period: Period, span_hours: Optional[int] = None) -> np.ndarray:
        """Anchors (datetime64[h]) whose last ``span_hours`` lie inside ``period``.

        ``span_hours`` defaults to the longest target span, which keeps every
        target inside the period. All look-back windows stay inside the data.
        """
        span = self.target_span if span_hours is None else span_hours
        arr = self.basins[basin]
        first = period.start_hour + np.timedelta64(span, "h")
        last = period.end_hour
        for b, sspec in enumerate(self.config.spec):
            start = arr.start[sspec.scale]
            first = max(first, start + sspec.seq_len * sspec.scale.step)
            last = min(last, start + len(arr.targets[b]) * sspec.scale.step)
        step = self.anchor_scale.step_hours
        hours = int(first.astype(np.int64))
        first = np.datetime64(-(-hours // step) * step, "h")
        if last < first:
            return np.zeros(0, dtype="datetime64[h]")
        return np.arange(first, last + np.timedelta64(1, "h"), self.coarse_step)

    def samples(self, period: Period) -> Tuple[np.ndarray, np.ndarray]:
        """All (basin index, anchor) pairs of ``period``, basin-major."""
        idx, anchors = [], []
        for b in range(len(self.basins)):
            a = self.anchors(b, period)
            idx.append(np.full(a.size, b, dtype=np.int64))
            anchors.append(a)
        return np.concatenate(idx), np.concatenate(anchors)

    def batch(self, basin_idx: np.ndarray, anchors: np.ndarray, with_targets: bool = True):
        """Branch inputs ``(L, B, input_size)``, standardized targets ``(B, window)`` and sigma ``(B,)``."""
        cfg = self.config
        nb = basin_idx.size
        inputs, targets = [], []
        for b, sspec in enumerate(cfg.spec):
            step = sspec.scale.step_hours
            nf = len(cfg.features[b])
            ns = len(cfg.static_features)
            x = np.empty((sspec.seq_len, nb, cfg.input_size(b)), dtype=self.dtype)
            if cfg.shared_weights:
                x[:, :, nf + ns:] = 0.0
                x[:, :, nf + ns + b] = 1.0
            y = np.empty((nb, sspec.predict_window)) if with_targets else None
            for k in range(nb):
                arr = self.basins[basin_idx[k]]
                j = int((anchors[k] - arr.start[sspec.scale]).astype(np.int64)) // step
                x[:, k, :nf] = arr.features[b][j - sspec.seq_len:j]
                if ns:
                    x[:, k, nf:nf + ns] = arr.static
                if with_targets:
                    y[k] = arr.targets[b][j - sspec.predict_window:j]
            inputs.append(x)
            targets.append(y)
        sigma = np.array([self.basins[i].sigma for i in basin_idx])
        return inputs, targets, sigma


def check_isolation(anchors: np.ndarray, span_hours: int, period: Period) -> None:
    """Raise if any anchor's targets leave ``period``."""
    if anchors.size == 0:
        return
    lo = anchors.min() - np.timedelta64(span_hours, "h")
    if lo < period.start_hour or anchors.max() > period.end_hour:
        raise AssertionError("batch contains targets outside the training period")


# --- optimization -----------------------------------------------------------

class Adam:
    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: Dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``clip_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainResult:
    params: MtsModelParams
    stats: StandardizationStats
    log: List[dict]
    seconds: float


def _loss_batch(preds, targets, sigma, config: MtsConfig) -> LossBatch:
    ratios = tuple(a.scale.ratio_to(b.scale) for a, b in zip(config.spec, config.spec[1:]))
    return LossBatch([np.asarray(p, dtype=np.float64) for p in preds], targets, sigma, ratios)


def train_model(train: TrainConfig, config: MtsConfig, datasets: Sequence[BasinDataset],
                params: Optional[MtsModelParams] = None,
                progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit ``config`` on the training period of ``datasets``."""
    t0 = time.perf_counter()
    dtype = train.dtype
    stats = fit_stats(datasets, config, train.train_period)
    basins = prepare(datasets, config, stats, dtype)
    sampler = Sampler(config, basins, dtype)
    idx, anchors = sampler.samples(train.train_period)
    if idx.size == 0:
        raise ValueError("no training samples: training period too short for the look-back")
    params = (build(config, train.seed) if params is None else params.copy()).astype(dtype)
    named = params.named()
    opt = Adam(named)
    order_rng = np.random.default_rng([train.seed, 0])
    drop_rng = np.random.default_rng([train.seed, 1])
    workspace = Workspace()
    reg_weight = train.regularization_weight if train.regularization else 0.0
    log = []
    LOGGER.info("training on %d samples from %d basins", idx.size, len(basins))
    for epoch in range(1, train.epochs + 1):
        lr = lr_at(train.lr_schedule, epoch)
        order = order_rng.permutation(idx.size)
        losses = []
        for lo in range(0, order.size, train.batch_size):
            sel = order[lo:lo + train.batch_size]
            check_isolation(anchors[sel], sampler.target_span, train.train_period)
            inputs, targets, sigma = sampler.batch(idx[sel], anchors[sel])
            preds, tape = forward(params, config, inputs, training=True, rng=drop_rng, workspace=workspace)
            loss, d_preds = nse_reg_loss(_loss_batch(preds, targets, sigma, config), train.epsilon, reg_weight)
            if not np.isfinite(loss) or loss > train.max_loss:
                raise DivergenceError(f"loss {loss} at epoch {epoch}, batch {lo // train.batch_size}")
            grads = backward(params, config, tape, d_preds, workspace)
            clip_gradients(grads, train.clip_norm)
            opt.step(named, grads, lr)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr}
        if epoch % train.validate_every == 0 or epoch == train.epochs:
            scores = validation_scores(params, config, sampler, train.validation_period, stats)
            row.update({f"val_median_nse_{s.name}": v for s, v in scores.items()})
        log.append(row)
        LOGGER.info("epoch %d %s", epoch, row)
        if progress is not None:
            progress(row)
    return TrainResult(params, stats, log, time.perf_counter() - t0)


# --- prediction -------------------------------------------------------------

def predict_anchors(params: MtsModelParams, config: MtsConfig, sampler: Sampler, basin: int,
                    anchors: np.ndarray, q_mean: float, q_std: float,
                    batch_size: int = 256) -> PredictionBundle:
    """Evaluation-mode predictions (mm/h) for each anchor, shape ``(n_anchors, window)`` per timescale."""
    out: Dict[Timescale, List[np.ndarray]] = {s: [] for s in config.scales}
    workspace = Workspace()
    for lo in range(0, anchors.size, batch_size):
        a = anchors[lo:lo + batch_size]
        inputs, _, _ = sampler.batch(np.full(a.size, basin), a, with_targets=False)
        preds, _ = forward(params, config, inputs, training=False, workspace=workspace)
        for s, p in zip(config.scales, preds):
            out[s].append(np.asarray(p, dtype=np.float64) * q_std + q_mean)
    return PredictionBundle({s: (np.concatenate(v) if v else np.zeros((0, w.predict_window)))
                             for (s, v), w in zip(out.items(), config.spec)})


def tile_predictions(bundle: PredictionBundle, anchors: np.ndarray, coarse: Timescale,
                     period: Period) -> Dict[Timescale, RegularSeries]:
    """Lay per-anchor predictions on a regular grid covering ``period``.

    From each anchor only the steps within its last coarse step are kept, so
    consecutive anchors tile the timeline without overlap. Steps no anchor
    covers stay NaN.
    """
    out = {}
    start = period.start_hour
    n_hours = int((period.end_hour - start).astype(np.int64))
    for s in bundle.scales:
        per = coarse.ratio_to(s)
        vals = np.full(n_hours // s.step_hours, np.nan)
        pred = bundle[s]
        keep = min(per, pred.shape[1])
        for k, a in enumerate(anchors):
            end = int((a - start).astype(np.int64)) // s.step_hours
            lo = end - keep
            if lo >= 0 and end <= vals.size:
                vals[lo:end] = pred[k, pred.shape[1] - keep:]
        out[s] = RegularSeries(start, s, vals)
    return out


def period_series(values: np.ndarray, start: np.datetime64, scale: Timescale,
                  period: Period) -> RegularSeries:
    """``values`` (a grid from ``start``) cut or NaN-padded to exactly cover ``period``."""
    n = int((period.end_hour - period.start_hour) / scale.step)
    out = np.full(n, np.nan)
    off = int((start - period.start_hour) / scale.step)
    lo, hi = max(0, off), min(n, off + values.size)
    if hi > lo:
        out[lo:hi] = values[lo - off:hi - off]
    return RegularSeries(period.start_hour, scale, out)


def observed(dataset: BasinDataset, scale: Timescale, period: Period) -> RegularSeries:
    q = dataset.discharge[scale]
    return period_series(q.values, q.start, scale, period)


def predict_period(params: MtsModelParams, config: MtsConfig, sampler: Sampler, basin: int,
                   period: Period, stats: StandardizationStats) -> Dict[Timescale, RegularSeries]:
    anchors = _eval_anchors(sampler, basin, period)
    bundle = predict_anchors(params, config, sampler, basin, anchors, stats.q_mean, stats.q_std)
    return tile_predictions(bundle, anchors, sampler.anchor_scale, period)


def _eval_anchors(sampler: Sampler, basin: int, period: Period) -> np.ndarray:
    """Anchors whose last coarse step lies inside ``period`` (look-back may precede it)."""
    return sampler.anchors(basin, period, sampler.anchor_scale.step_hours)


def validation_scores(params: MtsModelParams, config: MtsConfig, sampler: Sampler, period: Period,
                      stats: StandardizationStats) -> Dict[Timescale, float]:
    """Median NSE across basins per timescale on ``period``."""
    per_scale: Dict[Timescale, List[float]] = {s: [] for s in config.scales}
    for b, arr in enumerate(sampler.basins):
        sims = predict_period(params, config, sampler, b, period, stats)
        for k, s in enumerate(config.scales):
            q = arr.targets[k] * stats.q_std + stats.q_mean
            obs = period_series(q, arr.start[s], s, period)
            per_scale[s].append(metrics.nse(obs.values, sims[s].values))
    return {s: (float(np.nanmedian(v)) if np.any(~np.isnan(v)) else float("nan"))
            for s, v in per_scale.items()}


# --- model directories ------------------------------------------------------

MODEL_FILE = "model.json"
STATS_FILE = "stats.json"
LOG_FILE = "train_log.csv"


@dataclass
class TrainedModel:
    """One or more component models sharing data, periods and seed.

    ``kind`` is ``mts``, ``smts`` or ``naive``; a naive model has one
    single-timescale component per timescale.
    """

    kind: str
    components: List[Tuple[MtsConfig, MtsModelParams, StandardizationStats]]
    train: TrainConfig
    basins: List[str]
    log: List[dict] = field(default_factory=list)
    data_dir: Optional[str] = None

    @property
    def scales(self) -> List[Timescale]:
        return [s for cfg, _, _ in self.components for s in cfg.scales]

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        comps = []
        for k, (cfg, params, stats) in enumerate(self.components):
            name = f"weights_{k}.ckpt"
            save_checkpoint(out_dir / name, params.named(), cfg.config_hash())
            (out_dir / f"stats_{k}.json").write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=1) + "\n")
            comps.append({"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "weights": name,
                          "stats": f"stats_{k}.json"})
        meta = {"kind": self.kind, "components": comps, "train": self.train.to_dict(), "basins": self.basins,
                "data_dir": self.data_dir}
        (out_dir / MODEL_FILE).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        write_log(self.log, out_dir / LOG_FILE)
        return out_dir

    @classmethod
    def load(cls, model_dir) -> "TrainedModel":
        model_dir = Path(model_dir)
        meta = json.loads((model_dir / MODEL_FILE).read_text())
        train = TrainConfig.from_dict(meta["train"])
        comps = []
        for c in meta["components"]:
            cfg = MtsConfig.from_dict(c["config"])
            if cfg.config_hash() != c["config_hash"]:
                raise ValueError(f"{model_dir}: config hash mismatch in model.json")
            arrays, _ = load_checkpoint(model_dir / c["weights"], expected_hash=cfg.config_hash())
            params = build(cfg, 0).astype(train.dtype).with_arrays(arrays)
            stats = StandardizationStats.from_dict(json.loads((model_dir / c["stats"]).read_text()))
            comps.append((cfg, params, stats))
        return cls(meta["kind"], comps, train, list(meta["basins"]), data_dir=meta.get("data_dir"))

    def predict(self, datasets: Sequence[BasinDataset], period: Period
                ) -> Dict[str, Dict[Timescale, RegularSeries]]:
        """Tiled mm/h predictions per basin and timescale over ``period``."""
        out: Dict[str, Dict[Timescale, RegularSeries]] = {d.basin_id: {} for d in datasets}
        for cfg, params, stats in self.components:
            sampler = Sampler(cfg, prepare(datasets, cfg, stats, self.train.dtype), self.train.dtype)
            for b, d in enumerate(datasets):
                out[d.basin_id].update(predict_period(params, cfg, sampler, b, period, stats))
        return out


def write_log(log: Sequence[dict], path: Path) -> None:
    keys: List[str] = []
    for row in log:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: ("" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(v))
                        for k, v in row.items()})


def naive_components(config: MtsConfig) -> List[MtsConfig]:
    """One single-timescale config per timescale of ``config``."""
    from .timeseries import SequenceSpec

    anchor = config.anchor_scale.step_hours
    return [MtsConfig(SequenceSpec((s,)), (f,), (h,), config.static_features, False,
                      config.dropout_rate, config.forget_bias,
                      anchor if anchor != s.scale.step_hours else None)
            for s, f, h in zip(config.spec, config.features, config.hidden_sizes)]


def train_run(kind: str, train: TrainConfig, config: MtsConfig,
              datasets: Sequence[BasinDataset]) -> TrainedModel:
    """Train an ``mts``/``smts`` model or the per-timescale ``naive`` set."""
    if kind == "naive":
        configs = naive_components(config)
    elif kind in ("mts", "smts"):
        configs = [replace(config, shared_weights=(kind == "smts"))]
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    comps, log = [], []
    for k, cfg in enumerate(configs):
        res = train_model(train, cfg, datasets)
        comps.append((cfg, res.params, res.stats))
        log += [{"component": k, **row} for row in res.log]
    return TrainedModel(kind, comps, train, [d.basin_id for d in datasets], log)


# --- ensembles --------------------------------------------------------------

def _member_job(args):
    kind, train, config, datasets, out_dir, data_dir = args
    model = train_run(kind, train, config, datasets)
    model.data_dir = data_dir
    model.save(out_dir)
    return str(out_dir)


def train_ensemble(n: int, base_seed: int, kind: str, train: TrainConfig, config: MtsConfig,
                   datasets: Sequence[BasinDataset], out_dir, jobs: int = 1,
                   period: Optional[Period] = None, data_dir: Optional[str] = None):
    """Train members with seeds ``base_seed .. base_seed + n - 1``.

    Returns member directories and, per basin, the member-mean predictions
    over ``period`` (test period by default).
    """
    if n < 1:
        raise ValueError("ensemble size must be at least 1")
    out_dir = Path(out_dir)
    tasks = [(kind, replace(train, seed=base_seed + k), config, list(datasets), out_dir / f"member_{k:02d}",
              data_dir) for k in range(n)]
    dirs: List[str] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_member_job, t) for t in tasks]
            for k, f in enumerate(futures):
                try:
                    dirs.append(f.result())
                except Exception as err:
                    raise RuntimeError(f"ensemble member {k} failed: {err}") from err
    else:
        for k, t in enumerate(tasks):
            try:
                dirs.append(_member_job(t))
            except Exception as err:
                raise RuntimeError(f"ensemble member {k} failed: {err}") from err
    period = period or train.test_period
    member_preds = [TrainedModel.load(d).predict(datasets, period) for d in dirs]
    ensemble = {}
    for d in datasets:
        bundles = [PredictionBundle({s: v.values for s, v in m[d.basin_id].items()}) for m in member_preds]
        mean = metrics.ensemble_mean(bundles)
        ensemble[d.basin_id] = {s: RegularSeries(period.start_hour, s, v) for s, v in mean.values.items()}
    return dirs, ensemble


# --- grid search ------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    regularization: Tuple[bool, ...] = (True,)
    hidden_size: Tuple[int, ...] = (64,)
    fine_seq_len: Tuple[int, ...] = (336,)
    dropout: Tuple[float, ...] = (0.4,)
    lr_schedule: Tuple[Tuple[Tuple[int, float], ...], ...] = (DEFAULT_SCHEDULE,)
    batch_size: Tuple[int, ...] = (256,)
    seeds: int = 3

    def __post_init__(self):
        for name in ("regularization", "hidden_size", "fine_seq_len", "dropout", "lr_schedule", "batch_size"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        if self.seeds < 1:
            raise ValueError("seeds must be at least 1")


def _cell_config(config: MtsConfig, hidden: int, fine_len: int, dropout: float) -> MtsConfig:
    from .timeseries import ScaleSpec, SequenceSpec

    scales = list(config.spec)
    last = scales[-1]
    if len(scales) > 1:
        scales[-1] = ScaleSpec(last.scale, fine_len, last.predict_window)
    return replace(config, spec=SequenceSpec(tuple(scales)), hidden_sizes=(hidden,) * len(scales),
                   dropout_rate=dropout)


def _cell_job(args):
    kind, train, config, datasets = args
    try:
        res = train_model(train, replace(config, shared_weights=(kind == "smts")), datasets)
    except DivergenceError:
        return None
    final = res.log[-1]
    return float(np.mean([v for k, v in final.items() if k.startswith("val_median_nse_")]))


def _run_cells(cells, kind, config, train, datasets, seeds, jobs):
    tasks, owners = [], []
    for c, cell in enumerate(cells):
        cfg = _cell_config(config, cell["hidden_size"], cell["fine_seq_len"], cell["dropout"])
        tr = replace(train, regularization=cell["regularization"], lr_schedule=cell["lr_schedule"],
                     batch_size=cell["batch_size"])
        for s in range(seeds):
            tasks.append((kind, replace(tr, seed=train.seed + s), cfg, list(datasets)))
            owners.append(c)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_cell_job, tasks))
    else:
        scores = [_cell_job(t) for t in tasks]
    results = []
    for c, cell in enumerate(cells):
        mine = [s for s, o in zip(scores, owners) if o == c]
        ok = [s for s in mine if s is not None and np.isfinite(s)]
        results.append({**cell, "score": float(np.mean(ok)) if ok else float("nan"),
                        "diverged": len(mine) - len(ok), "seeds": len(mine)})
    return results


def rank_cells(results: List[dict]) -> List[dict]:
    """Best score first; ties by smaller hidden size, then lower dropout; all-diverged cells last."""
    def key(r):
        dead = r["diverged"] == r["seeds"] or not np.isfinite(r["score"])
        return (dead, -r["score"] if not dead else 0.0, r["hidden_size"], r["dropout"])
    return sorted(results, key=key)


def grid_search(grid: GridSpec, kind: str, config: MtsConfig, train: TrainConfig,
                datasets: Sequence[BasinDataset], jobs: int = 1) -> List[dict]:
    """Two-stage search; returns all cells ranked (stage 2 first, then stage 1)."""
    stage1 = [{"stage": 1, "regularization": r, "hidden_size": h, "fine_seq_len": f, "dropout": d,
               "lr_schedule": grid.lr_schedule[0], "batch_size": grid.batch_size[0]}
              for r, h, f, d in itertools.product(grid.regularization, grid.hidden_size,
                                                  grid.fine_seq_len, grid.dropout)]
    ranked1 = rank_cells(_run_cells(stage1, kind, config, train, datasets, grid.seeds, jobs))
    best = ranked1[0]
    stage2 = [{**{k: best[k] for k in ("regularization", "hidden_size", "fine_seq_len", "dropout")},
               "stage": 2, "lr_schedule": lr, "batch_size": bs}
              for lr, bs in itertools.product(grid.lr_schedule, grid.batch_size)]
    ranked2 = rank_cells(_run_cells(stage2, kind, config, train, datasets, grid.seeds, jobs))
    return ranked2 + ranked1
