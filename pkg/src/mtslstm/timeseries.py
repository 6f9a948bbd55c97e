"""Time-axis arithmetic for regularly sampled hydrometeorological series.

All timestamps are UTC and aligned to whole hours; they are carried as
``numpy.datetime64`` values with hour resolution. A value at index ``i`` of a
:class:`RegularSeries` covers the interval ``[start + i*step, start + (i+1)*step)``
and is labelled with the interval start. Missing observations are NaN; a block
aggregate that touches a NaN is NaN itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np

HOUR = np.timedelta64(1, "h")
STD_FLOOR = 1e-5


class AlignmentError(ValueError):
    """Raised when two timescales, sequence lengths or timestamps do not line up."""

    def __init__(self, message: str, fraction: float | None = None):
        super().__init__(message)
        self.fraction = fraction


@dataclass(frozen=True, order=True)
class Timescale:
    step_hours: int

    def __post_init__(self):
        if int(self.step_hours) != self.step_hours or self.step_hours < 1:
            raise ValueError(f"step_hours must be a positive integer, got {self.step_hours!r}")

    @property
    def step(self) -> np.timedelta64:
        return np.timedelta64(int(self.step_hours), "h")

    @property
    def name(self) -> str:
        return f"{self.step_hours}h"

    @classmethod
    def parse(cls, text) -> "Timescale":
        if isinstance(text, Timescale):
            return text
        text = str(text).strip().lower()
        if text in ("d", "1d", "daily"):
            return cls(24)
        if text in ("hourly",):
            return cls(1)
        return cls(int(text.rstrip("h")))

    def ratio_to(self, finer: "Timescale") -> int:
        """Number of ``finer`` steps in one step of ``self``."""
        if self.step_hours % finer.step_hours:
            raise AlignmentError(
                f"{self.step_hours}h is not an integer multiple of {finer.step_hours}h",
                self.step_hours / finer.step_hours,
            )
        return self.step_hours // finer.step_hours

    def is_boundary(self, t: np.datetime64) -> bool:
        hours = to_hours(t).astype(np.int64)
        return int(hours) % self.step_hours == 0


DAILY = Timescale(24)
HOURLY = Timescale(1)


def to_hours(t) -> np.datetime64:
    """Coerce a timestamp-like value to an hour-resolution ``datetime64``."""
    if isinstance(t, str):
        t = t.rstrip("Z")
    value = np.datetime64(t)
    hours = value.astype("datetime64[h]")
    if hours != value:
        raise AlignmentError(f"timestamp {t} is not aligned to a whole hour")
    return hours


@dataclass(frozen=True)
class RegularSeries:
    start: np.datetime64
    scale: Timescale
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", to_hours(self.start))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("RegularSeries needs a non-empty 1-d value vector")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def end(self) -> np.datetime64:
        """Exclusive end instant of the covered span."""
        return self.start + len(self) * self.scale.step

    @property
    def mask(self) -> np.ndarray:
        """True where a value is present."""
        return ~np.isnan(self.values)

    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(len(self)) * self.scale.step

    def index_of(self, t) -> int:
        """Index of the step that starts at ``t``."""
        offset = (to_hours(t) - self.start).astype(np.int64)
        if offset % self.scale.step_hours:
            raise AlignmentError(f"{t} is not on the {self.scale.name} grid of this series")
        return int(offset // self.scale.step_hours)

    def slice_time(self, start, end) -> "RegularSeries":
        """Sub-series covering ``[start, end)``."""
        i, j = self.index_of(start), self.index_of(end)
        if i < 0 or j > len(self) or j <= i:
            raise AlignmentError(f"[{start}, {end}) is outside the series span")
        return RegularSeries(self.start + i * self.scale.step, self.scale, self.values[i:j])


def aggregate(series: RegularSeries, target: Timescale) -> RegularSeries:
    """Block-mean a series onto a coarser timescale.

    Raises
    ------
    AlignmentError
        If the ratio is not integer, the start is not on a ``target`` boundary,
        or the length is not a multiple of the ratio.
    """
    ratio = target.ratio_to(series.scale)
    if not target.is_boundary(series.start):
        raise AlignmentError(f"series start {series.start} is not on a {target.name} boundary")
    if len(series) % ratio:
        raise AlignmentError(f"length {len(series)} is not a multiple of {ratio}")
    if ratio == 1:
        return RegularSeries(series.start, target, series.values.copy())
    blocks = series.values.reshape(-1, ratio)
    return RegularSeries(series.start, target, blocks.mean(axis=1))


def aggregate_array(values: np.ndarray, ratio: int, axis: int = -1) -> np.ndarray:
    """Block means of ``ratio`` consecutive entries along ``axis``."""
    values = np.moveaxis(np.asarray(values), axis, -1)
    if values.shape[-1] % ratio:
        raise AlignmentError(f"length {values.shape[-1]} is not a multiple of {ratio}")
    out = values.reshape(values.shape[:-1] + (-1, ratio)).mean(axis=-1)
    return np.moveaxis(out, -1, axis)


def broadcast_coarse_features(coarse: RegularSeries, fine_scale: Timescale) -> RegularSeries:
    """Repeat each coarse value over the fine steps it spans."""
    ratio = coarse.scale.ratio_to(fine_scale)
    return RegularSeries(coarse.start, fine_scale, np.repeat(coarse.values, ratio))


@dataclass(frozen=True)
class ScaleSpec:
    """Input sequence length and prediction window of one timescale."""

    scale: Timescale
    seq_len: int
    predict_window: int

    def __post_init__(self):
        if self.seq_len < 1 or self.predict_window < 1:
            raise ValueError("seq_len and predict_window must be positive")
        if self.predict_window > self.seq_len:
            raise ValueError(
                f"predict_window {self.predict_window} exceeds seq_len {self.seq_len} "
                f"at {self.scale.name}"
            )

    @property
    def span_hours(self) -> int:
        return self.seq_len * self.scale.step_hours


def split_index(coarse: Tuple[Timescale, int], fine: Tuple[Timescale, int]) -> int:
    """Number of coarse steps consumed before the fine branch takes over.

    The fine branch starts from the coarse state after step ``i`` (1-based),
    with ``i = (seq_len_c * step_c - seq_len_f * step_f) / step_c``.

    >>> split_index((Timescale(24), 365), (Timescale(1), 72))
    362
    """
    (cs, cl), (fs, fl) = coarse, fine
    num = cl * cs.step_hours - fl * fs.step_hours
    frac = Fraction(num, cs.step_hours)
    if frac.denominator != 1:
        value = float(frac)
        raise AlignmentError(
            f"split index ({cl}*{cs.step_hours} - {fl}*{fs.step_hours})/{cs.step_hours} = "
            f"{value:.2f} is not an integer: the {fs.name} branch would start inside a "
            f"{cs.name} step",
            value,
        )
    i = int(frac)
    if not 0 <= i < cl:
        raise AlignmentError(
            f"split index {i} outside [0, {cl}): the {fs.name} sequence must be shorter "
            f"than the {cs.name} look-back",
            float(i),
        )
    return i


@dataclass(frozen=True)
class SequenceSpec:
    """Per-timescale sequence layout, coarsest timescale first."""

    scales: Tuple[ScaleSpec, ...]

    def __post_init__(self):
        scales = tuple(self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ValueError("SequenceSpec needs at least one timescale")
        for a, b in zip(scales, scales[1:]):
            if a.scale.step_hours <= b.scale.step_hours:
                raise ValueError("timescales must be strictly decreasing in step_hours")
            # the split check comes first so a misaligned layout reports its fractional index
            split_index((a.scale, a.seq_len), (b.scale, b.seq_len))
            a.scale.ratio_to(b.scale)

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, i) -> ScaleSpec:
        return self.scales[i]

    @property
    def coarsest(self) -> Timescale:
        return self.scales[0].scale

    def split_indices(self) -> List[int]:
        return [
            split_index((a.scale, a.seq_len), (b.scale, b.seq_len))
            for a, b in zip(self.scales, self.scales[1:])
        ]

    @property
    def lookback_hours(self) -> int:
        return max(s.span_hours for s in self.scales)

    @property
    def total_steps(self) -> int:
        return sum(s.seq_len for s in self.scales)

    @classmethod
    def from_tuples(cls, items: Sequence[Tuple[int, int, int]]) -> "SequenceSpec":
        return cls(tuple(ScaleSpec(Timescale(s), l, w) for s, l, w in items))


def window_indices(series_start: np.datetime64, spec: ScaleSpec, anchor: np.datetime64) -> Tuple[int, int]:
    """Index range ``[i, j)`` of the input window of ``spec`` that ends at ``anchor``."""
    offset = int((to_hours(anchor) - to_hours(series_start)).astype(np.int64))
    step = spec.scale.step_hours
    if offset % step:
        raise AlignmentError(f"anchor {anchor} is not on the {spec.scale.name} grid")
    j = offset // step
    return j - spec.seq_len, j


def extract_sample(dataset, spec: SequenceSpec, anchor) -> Dict[Timescale, Tuple[np.ndarray, np.ndarray]]:
    """Input matrix and target vector for every timescale of ``spec``.

    All windows end at ``anchor``; the input matrix of a timescale has shape
    ``(seq_len, n_features)`` and the target holds the last ``predict_window``
    observed discharge values (NaN where missing).
    """
    anchor = to_hours(anchor)
    if not spec.coarsest.is_boundary(anchor):
        raise AlignmentError(f"anchor {anchor} is not on a {spec.coarsest.name} boundary")
    out = {}
    for s in spec:
        forcing = dataset.inputs(s.scale)
        q = dataset.discharge[s.scale]
        i, j = window_indices(q.start, s, anchor)
        if i < 0 or j > len(q):
            raise AlignmentError(
                f"{s.scale.name} window [{q.start + i * s.scale.step}, {anchor}) exceeds the data range"
            )
        out[s.scale] = (forcing[i:j], q.values[j - s.predict_window:j])
    return out


@dataclass
class StandardizationStats:
    """Training-period feature moments and discharge scales."""

    feature_mean: Dict[str, float] = field(default_factory=dict)
    feature_std: Dict[str, float] = field(default_factory=dict)
    basin_q_std: Dict[str, float] = field(default_factory=dict)
    q_mean: float = 0.0
    q_std: float = 1.0

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "basin_q_std": self.basin_q_std,
            "q_mean": self.q_mean,
            "q_std": self.q_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(dict(d["feature_mean"]), dict(d["feature_std"]), dict(d["basin_q_std"]),
                   float(d["q_mean"]), float(d["q_std"]))


def floored_std(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return STD_FLOOR
    return max(float(values.std()), STD_FLOOR)


def fit_feature_stats(columns: Dict[str, np.ndarray]) -> Tuple[Dict[str, float], Dict[str, float]]:
    means, stds = {}, {}
    for name, col in columns.items():
        col = np.asarray(col, dtype=np.float64)
        means[name] = float(np.nanmean(col))
        stds[name] = floored_std(col)
    return means, stds


def standardize(features: np.ndarray, names: Sequence[str], stats: StandardizationStats) -> np.ndarray:
    """``(x - mean) / std`` column by column (last axis)."""
    mean = np.array([stats.feature_mean[n] for n in names])
    std = np.array([stats.feature_std[n] for n in names])
    return (np.asarray(features, dtype=np.float64) - mean) / std


def standardize_discharge(values, stats: StandardizationStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.q_mean) / stats.q_std


def destandardize_discharge(values, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.q_std + stats.q_mean
