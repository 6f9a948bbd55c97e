"""Hydrograph skill scores, hydrologic signatures and cross-timescale consistency.

Conventions used throughout:

- Undefined results are ``nan``, never 0.
- Steps where either observation or simulation is NaN are dropped from
  distribution metrics. Time-ordered metrics keep the time axis.
- Standard deviations are population (``ddof=0``) values.
- Quantiles use linear interpolation between order statistics
  (``numpy.quantile`` default). Flow-duration segments count
  ``round(fraction * n)`` sorted values.
- Logarithms of flow clamp at ``LOG_FLOOR`` mm/h.
- Hydrological years start on October 1.
"""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import peak_prominences

from .timeseries import RegularSeries, Timescale

LOGGER = logging.getLogger(__name__)

LOG_FLOOR = 1e-6
BASEFLOW_ALPHA = 0.925
PEAK_MIN_DISTANCE = 100
HYDRO_YEAR_MONTH = 10

METRIC_NAMES = ("nse", "mse", "rmse", "kge", "pearson_r", "alpha_nse", "beta_nse",
                "fhv", "flv", "fms", "peak_timing")
SIGNATURE_NAMES = ("baseflow_index", "hfd_mean", "high_q_dur", "high_q_freq", "low_q_dur",
                   "low_q_freq", "q5", "q95", "q_mean", "runoff_ratio", "slope_fdc",
                   "stream_elasticity", "zero_q_freq")

NAN = float("nan")


def _values(x) -> np.ndarray:
    if isinstance(x, RegularSeries):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _paired(obs, sim) -> Tuple[np.ndarray, np.ndarray]:
    obs, sim = _values(obs), _values(sim)
    if obs.shape != sim.shape:
        raise ValueError(f"obs and sim differ in shape: {obs.shape} vs {sim.shape}")
    keep = ~(np.isnan(obs) | np.isnan(sim))
    return obs[keep], sim[keep]


def mse(obs, sim) -> float:
    o, s = _paired(obs, sim)
    if o.size == 0:
        return NAN
    return float(np.mean((s - o) ** 2))


def rmse(obs, sim) -> float:
    return float(np.sqrt(mse(obs, sim)))


def nse(obs, sim) -> float:
    o, s = _paired(obs, sim)
    if o.size < 2:
        return NAN
    denom = np.sum((o - o.mean()) ** 2)
    if denom == 0:
        return NAN
    return float(1.0 - np.sum((s - o) ** 2) / denom)


def pearson_r(obs, sim) -> float:
    o, s = _paired(obs, sim)
    if o.size < 2:
        return NAN
    do, ds = o - o.mean(), s - s.mean()
    denom = np.sqrt(np.sum(do * do) * np.sum(ds * ds))
    if denom == 0:
        return NAN
    return float(np.clip(np.sum(do * ds) / denom, -1.0, 1.0))


def alpha_nse(obs, sim) -> float:
    """Ratio of simulated to observed standard deviation."""
    o, s = _paired(obs, sim)
    if o.size < 2 or o.std() == 0:
        return NAN
    return float(s.std() / o.std())


def beta_nse(obs, sim) -> float:
    """Mean bias normalized by the observed standard deviation."""
    o, s = _paired(obs, sim)
    if o.size < 2 or o.std() == 0:
        return NAN
    return float((s.mean() - o.mean()) / o.std())


def kge(obs, sim) -> float:
    o, s = _paired(obs, sim)
    if o.size < 2 or o.std() == 0 or o.mean() == 0:
        return NAN
    r = pearson_r(o, s)
    if np.isnan(r):
        return NAN
    alpha = s.std() / o.std()
    beta = s.mean() / o.mean()
    return float(1.0 - np.sqrt((r - 1) ** 2 + (alpha - 1) ** 2 + (beta - 1) ** 2))


def _segment_count(n: int, fraction: float) -> int:
    return int(np.round(fraction * n))


def fhv(obs, sim, fraction: float = 0.02) -> float:
    """Percent bias of the highest ``fraction`` of the flow-duration curve."""
    o, s = _paired(obs, sim)
    k = _segment_count(o.size, fraction)
    if k < 1:
        return NAN
    oh = np.sort(o)[::-1][:k]
    sh = np.sort(s)[::-1][:k]
    total = oh.sum()
    if total == 0:
        return NAN
    return float((sh - oh).sum() / total * 100.0)


def flv(obs, sim, fraction: float = 0.3) -> float:
    """Percent bias of the lowest ``fraction`` of the log flow-duration curve."""
    o, s = _paired(obs, sim)
    k = _segment_count(o.size, fraction)
    if k < 2:
        return NAN
    ol = np.log(np.maximum(np.sort(o)[:k], LOG_FLOOR))
    sl = np.log(np.maximum(np.sort(s)[:k], LOG_FLOOR))
    qol = np.sum(ol - ol.min())
    qsl = np.sum(sl - sl.min())
    if qol == 0:
        return NAN
    return float(-(qsl - qol) / qol * 100.0)


def fms(obs, sim, lower: float = 0.2, upper: float = 0.8) -> float:
    """Percent bias of the mid-segment slope of the log flow-duration curve."""
    o, s = _paired(obs, sim)
    if o.size < 2:
        return NAN
    lo = np.log(np.maximum(o, LOG_FLOOR))
    ls = np.log(np.maximum(s, LOG_FLOOR))
    o_hi, o_lo = np.quantile(lo, [upper, lower])
    s_hi, s_lo = np.quantile(ls, [upper, lower])
    slope_o = o_hi - o_lo
    if slope_o == 0:
        return NAN
    return float(((s_hi - s_lo) - slope_o) / slope_o * 100.0)


def local_maxima(x: np.ndarray) -> np.ndarray:
    """Strict local maxima; a flat top counts once, at its first index. Ends never count."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(x) != 0) + 1
    starts = np.concatenate(([0], change))
    vals = x[starts]
    if starts.size < 3:
        return np.zeros(0, dtype=np.int64)
    inner = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    return starts[1:-1][inner].astype(np.int64)


def thin_peaks(peaks: np.ndarray, heights: np.ndarray, min_distance: int) -> np.ndarray:
    """Drop the lowest peak that has a neighbour closer than ``min_distance`` until none does.

    Equal heights drop the later peak.
    """
    peaks = list(peaks)
    heights = list(heights)
    while len(peaks) > 1:
        gaps = np.diff(peaks)
        crowded = np.zeros(len(peaks), dtype=bool)
        crowded[:-1] |= gaps < min_distance
        crowded[1:] |= gaps < min_distance
        if not crowded.any():
            break
        cand = np.flatnonzero(crowded)
        # lowest height first, later index first among equals
        victim = min(cand, key=lambda k: (heights[k], -peaks[k]))
        del peaks[victim]
        del heights[victim]
    return np.asarray(peaks, dtype=np.int64)


def peak_timing(obs, sim, window: int, min_distance: int = PEAK_MIN_DISTANCE) -> Tuple[float, int]:
    """Mean absolute lag (steps) between observed peaks and the simulated maxima near them.

    Returns ``(nan, 0)`` when no observed peak qualifies.
    """
    o, s = _values(obs), _values(sim)
    if o.shape != s.shape:
        raise ValueError("obs and sim differ in shape")
    valid = ~np.isnan(o)
    if valid.sum() < 3:
        return NAN, 0
    filled = np.where(valid, o, np.nanmin(o))
    peaks = local_maxima(filled)
    peaks = peaks[valid[peaks]]
    if peaks.size == 0:
        return NAN, 0
    prom = peak_prominences(filled, peaks)[0]
    peaks = peaks[prom >= np.std(o[valid])]
    peaks = thin_peaks(peaks, filled[peaks], min_distance)
    lags = []
    for t in peaks:
        lo, hi = max(0, t - window), min(s.size, t + window + 1)
        seg = s[lo:hi]
        if np.all(np.isnan(seg)):
            continue
        lags.append(abs(lo + int(np.nanargmax(seg)) - t))
    if not lags:
        return NAN, 0
    return float(np.mean(lags)), len(lags)


def peak_window(scale: Timescale) -> int:
    """Search half-width in steps: one day for sub-daily data, three steps for daily or coarser."""
    if scale.step_hours >= 24:
        return 3
    return 24 // scale.step_hours


def metric_report(obs, sim, scale: Timescale) -> Dict[str, float]:
    lag, _ = peak_timing(obs, sim, peak_window(scale))
    return {
        "nse": nse(obs, sim), "mse": mse(obs, sim), "rmse": rmse(obs, sim), "kge": kge(obs, sim),
        "pearson_r": pearson_r(obs, sim), "alpha_nse": alpha_nse(obs, sim),
        "beta_nse": beta_nse(obs, sim), "fhv": fhv(obs, sim), "flv": flv(obs, sim),
        "fms": fms(obs, sim), "peak_timing": lag,
    }


# --- signatures -------------------------------------------------------------

def lyne_hollick(q: np.ndarray, alpha: float = BASEFLOW_ALPHA, passes: int = 3) -> np.ndarray:
    """Baseflow from the forward/backward/forward digital filter."""
    base = np.asarray(q, dtype=np.float64).copy()
    for k in range(passes):
        src = base if k % 2 == 0 else base[::-1]
        out = np.empty_like(src)
        quick = 0.0
        out[0] = src[0]
        for t in range(1, src.size):
            quick = alpha * quick + (1 + alpha) / 2 * (src[t] - src[t - 1])
            quick = min(max(quick, 0.0), src[t])
            out[t] = src[t] - quick
        base = out if k % 2 == 0 else out[::-1]
    return base


def baseflow_index(q) -> float:
    q = _values(q)
    if q.size < 2 or np.isnan(q).any() or q.sum() <= 0:
        return NAN
    return float(lyne_hollick(q).sum() / q.sum())


def _runs(flags: np.ndarray) -> np.ndarray:
    """Lengths of maximal runs of True."""
    padded = np.concatenate(([False], flags, [False])).astype(np.int8)
    edges = np.diff(padded)
    return np.flatnonzero(edges == -1) - np.flatnonzero(edges == 1)


def _freq_dur(q: np.ndarray, flags: np.ndarray) -> Tuple[float, float]:
    valid = ~np.isnan(q)
    if valid.sum() == 0:
        return NAN, NAN
    freq = float(flags[valid].mean())
    runs = _runs(flags & valid)
    return freq, (float(runs.mean()) if runs.size else NAN)


def high_flow_stats(q) -> Tuple[float, float]:
    """Frequency and mean duration (steps) of flows above 9 times the median."""
    q = _values(q)
    med = np.nanmedian(q) if np.any(~np.isnan(q)) else NAN
    with np.errstate(invalid="ignore"):
        return _freq_dur(q, q > 9 * med)


def low_flow_stats(q) -> Tuple[float, float]:
    """Frequency and mean duration (steps) of flows below 0.2 times the mean."""
    q = _values(q)
    mean = np.nanmean(q) if np.any(~np.isnan(q)) else NAN
    with np.errstate(invalid="ignore"):
        return _freq_dur(q, q < 0.2 * mean)


def zero_flow_frequency(q) -> float:
    q = _values(q)
    q = q[~np.isnan(q)]
    return float(np.mean(q == 0)) if q.size else NAN


def flow_quantile(q, p: float) -> float:
    q = _values(q)
    q = q[~np.isnan(q)]
    return float(np.quantile(q, p)) if q.size else NAN


def slope_fdc(q) -> float:
    """Slope of the log flow-duration curve between 33 % and 66 % exceedance."""
    q = _values(q)
    q = q[~np.isnan(q)]
    if q.size < 2:
        return NAN
    hi, lo = np.quantile(q, [0.67, 0.34])
    return float((np.log(max(hi, LOG_FLOOR)) - np.log(max(lo, LOG_FLOOR))) / (0.66 - 0.33))


def hydro_years(series: RegularSeries) -> List[Tuple[int, int]]:
    """Index ranges ``[i, j)`` of complete hydrological years inside ``series``."""
    stamps = series.timestamps()
    years = stamps.astype("datetime64[Y]").astype(int) + 1970
    months = stamps.astype("datetime64[M]").astype(int) % 12 + 1
    hyear = years + (months >= HYDRO_YEAR_MONTH)
    out = []
    for y in np.unique(hyear):
        idx = np.flatnonzero(hyear == y)
        start = np.datetime64(f"{y - 1:04d}-{HYDRO_YEAR_MONTH:02d}-01T00", "h")
        end = np.datetime64(f"{y:04d}-{HYDRO_YEAR_MONTH:02d}-01T00", "h")
        expected = int((end - start) / series.scale.step)
        if idx.size == expected and stamps[idx[0]] == start:
            out.append((int(idx[0]), int(idx[-1]) + 1))
    return out


def hfd_mean(series: RegularSeries) -> float:
    """Mean day of the hydrological year at which half the annual flow has passed."""
    days = []
    for i, j in hydro_years(series):
        q = series.values[i:j]
        if np.isnan(q).any() or q.sum() <= 0:
            continue
        k = int(np.searchsorted(np.cumsum(q), 0.5 * q.sum()))
        days.append(k * series.scale.step_hours / 24.0)
    return float(np.mean(days)) if days else NAN


def stream_elasticity(series: RegularSeries, precip: RegularSeries) -> float:
    """Median over years of (dQ / mean Q) / (dP / mean P) on annual totals."""
    if len(precip) != len(series) or precip.start != series.start:
        raise ValueError("discharge and precipitation must share the time axis")
    qs, ps = [], []
    for i, j in hydro_years(series):
        q, p = series.values[i:j], precip.values[i:j]
        if np.isnan(q).any() or np.isnan(p).any():
            continue
        qs.append(q.sum())
        ps.append(p.sum())
    if len(qs) < 2:
        return NAN
    qs, ps = np.array(qs), np.array(ps)
    dq, dp = np.diff(qs), np.diff(ps)
    ok = dp != 0
    if not ok.any() or ps.mean() == 0 or qs.mean() == 0:
        return NAN
    return float(np.median((dq[ok] / qs.mean()) / (dp[ok] / ps.mean())))


def signatures(series: RegularSeries, precip: Optional[RegularSeries] = None) -> Dict[str, float]:
    q = series.values
    high_f, high_d = high_flow_stats(q)
    low_f, low_d = low_flow_stats(q)
    out = {
        "baseflow_index": baseflow_index(q),
        "hfd_mean": hfd_mean(series),
        "high_q_dur": high_d, "high_q_freq": high_f,
        "low_q_dur": low_d, "low_q_freq": low_f,
        "q5": flow_quantile(q, 0.05), "q95": flow_quantile(q, 0.95),
        "q_mean": float(np.nanmean(q)) if np.any(~np.isnan(q)) else NAN,
        "runoff_ratio": NAN, "slope_fdc": slope_fdc(q),
        "stream_elasticity": NAN, "zero_q_freq": zero_flow_frequency(q),
    }
    if precip is not None:
        pm = np.nanmean(precip.values)
        out["runoff_ratio"] = float(out["q_mean"] / pm) if pm > 0 else NAN
        out["stream_elasticity"] = stream_elasticity(series, precip)
    return out


def signature_correlation(observed: Sequence[Mapping[str, float]],
                          simulated: Sequence[Mapping[str, float]]) -> Dict[str, float]:
    """Pearson r across basins per signature; basins with an undefined value are dropped."""
    if len(observed) != len(simulated):
        raise ValueError("need one simulated signature set per observed one")
    out = {}
    names = observed[0].keys() if observed else ()
    for name in names:
        o = np.array([d.get(name, NAN) for d in observed], dtype=np.float64)
        s = np.array([d.get(name, NAN) for d in simulated], dtype=np.float64)
        keep = ~(np.isnan(o) | np.isnan(s))
        out[name] = pearson_r(o[keep], s[keep]) if keep.sum() >= 3 else NAN
    return out


def consistency_rmsd(coarse, fine, ratio: Optional[int] = None) -> float:
    """RMS difference between coarse predictions and block means of fine ones, in mm/day.

    Inputs are mm/h. For :class:`RegularSeries` the ratio and alignment are
    checked; plain arrays need ``ratio``.
    """
    if isinstance(coarse, RegularSeries) and isinstance(fine, RegularSeries):
        r = coarse.scale.ratio_to(fine.scale)
        if ratio is not None and ratio != r:
            raise ValueError(f"ratio {ratio} disagrees with timescales ({r})")
        if coarse.start != fine.start:
            raise ValueError("coarse and fine series must start together")
        ratio = r
    if ratio is None:
        raise ValueError("ratio required for plain arrays")
    c, f = _values(coarse), _values(fine)
    if f.size != ratio * c.size:
        raise ValueError(f"fine length {f.size} != {ratio} x coarse length {c.size}")
    # mean of per-step differences, so a broadcast coarse series gives exactly 0
    dev = (c[:, None] - f.reshape(c.size, ratio)).mean(axis=1)
    dev = dev[~np.isnan(dev)]
    if dev.size == 0:
        return NAN
    return float(np.sqrt(np.mean(dev * dev)) * 24.0)


def ensemble_mean(bundles):
    """Elementwise mean prediction over ensemble members."""
    from .model import PredictionBundle

    if not bundles:
        raise ValueError("empty ensemble")
    scales = bundles[0].scales
    out = {}
    for s in scales:
        arrays = [b[s] for b in bundles]
        if any(a.shape != arrays[0].shape for a in arrays):
            raise ValueError(f"ensemble members disagree in shape at {s.name}")
        out[s] = np.mean(np.stack(arrays), axis=0)
    return PredictionBundle(out)


def report_frame(rows: Iterable[Mapping[str, object]]) -> pd.DataFrame:
    """Report table with appended median rows per (timescale, model)."""
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        return frame
    numeric = [c for c in frame.columns if c not in ("basin", "timescale", "model")]
    summary = []
    for (scale, model), grp in frame.groupby(["timescale", "model"], sort=False):
        row = {"basin": "median", "timescale": scale, "model": model}
        row.update({c: float(np.nanmedian(grp[c].astype(float))) if grp[c].notna().any() else NAN
                    for c in numeric})
        summary.append(row)
    return pd.concat([frame, pd.DataFrame(summary)], ignore_index=True)
