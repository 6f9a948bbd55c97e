"""Deterministic synthetic watersheds: a two-reservoir linear bucket model.

Random numbers come from SplitMix64 (Steele, Lea & Flood 2014): the state
advances by the golden-ratio increment ``0x9E3779B97F4A7C15`` and every output
is the state passed through the finalizer

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniform variates are ``(z >> 11) * 2**-53``; exponential variates are
``-log(1 - u)``. Because the generator is a counter hash it vectorizes, and any
language with 64-bit unsigned arithmetic reproduces the same streams.

Rain arrives as a Poisson event process. Each event draws, in this order, its
inter-arrival gap (hours), its duration and its depth; the depth is spread evenly
over the event's hours. Effective rain is precipitation minus potential
evaporation, floored at zero. A share ``fast_fraction`` of it enters a fast
reservoir, the rest a slow one, and each drains a fixed fraction ``k`` of its
storage per hour.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import BasinDataset, write_attributes, write_basin
from .timeseries import DAILY, HOURLY, RegularSeries, aggregate

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1

DEFAULT_START = "2000-10-01T00"
MEAN_EVENT_HOURS = 6.0

# column names follow the eleven forcing slots of the hourly product
FORCING_NAMES = (
    "total_precipitation",  # mm/h (kg m-2 per hour)
    "temperature",  # K
    "pressure",  # Pa
    "longwave_radiation",  # W m-2
    "shortwave_radiation",  # W m-2
    "specific_humidity",  # kg kg-1
    "potential_energy",  # J kg-1
    "potential_evaporation",  # mm/h (kg m-2 per hour)
    "convective_fraction",  # -
    "wind_u",  # m s-1
    "wind_v",  # m s-1
)
ATTRIBUTE_NAMES = ("fast_k", "slow_k", "fast_fraction", "rain_event_rate",
                   "rain_event_depth", "pet_amplitude")

# parameter ranges sampled by generate_fleet
FLEET_RANGES = {
    "fast_k": (0.01, 0.04),
    "slow_k": (1.0 / (24 * 60), 1.0 / (24 * 15)),
    "fast_fraction": (0.3, 0.8),
    "rain_event_rate": (0.15, 0.5),
    "rain_event_depth": (5.0, 20.0),
    "pet_amplitude": (0.1, 0.4),
}


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 stream; ``next_u64(n)`` returns the next ``n`` outputs."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GOLDEN_GAMMA
        self.state = (self.state + n * int(GOLDEN_GAMMA)) & MASK64
        return _mix(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def exponential(self, n: int, mean: float = 1.0) -> np.ndarray:
        return -np.log1p(-self.uniform(n)) * mean


@dataclass(frozen=True)
class SynthBasinConfig:
    seed: int
    n_hours: int
    rain_event_rate: float  # events per day
    rain_event_depth: float  # mean mm per event
    pet_amplitude: float  # mm/h at peak radiation
    fast_k: float  # per hour
    slow_k: float  # per hour
    fast_fraction: float
    static_attrs: Tuple[float, ...] = ()
    start: str = DEFAULT_START
    # initial storages in mm; None starts at the long-run equilibrium
    init_fast: Optional[float] = None
    init_slow: Optional[float] = None

    def validate(self) -> None:
        if not (0 < self.fast_k < 1 and 0 < self.slow_k < 1):
            raise ValueError("recession coefficients must lie in (0, 1)")
        if not 0 <= self.fast_fraction <= 1:
            raise ValueError("fast_fraction must lie in [0, 1]")
        if min(self.rain_event_rate, self.rain_event_depth, self.pet_amplitude) < 0:
            raise ValueError("rates, depths and amplitudes must be non-negative")
        if self.n_hours < 2 * 365 * 24:
            raise ValueError("n_hours must cover at least two years")
        if self.n_hours % 24:
            raise ValueError("n_hours must be whole days")
        for name in ("init_fast", "init_slow"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


def rain_events(config: SynthBasinConfig, rng: SplitMix64) -> np.ndarray:
    """Hourly precipitation from the Poisson event process."""
    precip = np.zeros(config.n_hours)
    if config.rain_event_rate <= 0 or config.rain_event_depth <= 0:
        return precip
    mean_gap = 24.0 / config.rain_event_rate
    t = 0.0
    while True:
        gap, dur, depth = rng.uniform(3)
        t += -np.log1p(-gap) * mean_gap
        start = int(t)
        if start >= config.n_hours:
            return precip
        hours = 1 + int(-np.log1p(-dur) * (MEAN_EVENT_HOURS - 1))
        amount = -np.log1p(-depth) * config.rain_event_depth
        stop = min(start + hours, config.n_hours)
        precip[start:stop] += amount / hours


def _cycles(n_hours: int, start: np.datetime64) -> Tuple[np.ndarray, np.ndarray]:
    hours = np.arange(n_hours, dtype=np.float64)
    t0 = start.astype("datetime64[h]").astype(np.int64)
    abs_hours = hours + t0
    hour_of_day = abs_hours % 24
    day_of_year = (abs_hours / 24.0) % 365.25
    diurnal = np.sin(2 * np.pi * (hour_of_day - 6.0) / 24.0)
    # peaks around early July
    annual = np.sin(2 * np.pi * (day_of_year - 100.0) / 365.25)
    return diurnal, annual


def forcings(config: SynthBasinConfig, precip: np.ndarray) -> Dict[str, np.ndarray]:
    diurnal, annual = _cycles(config.n_hours, np.datetime64(config.start))
    n = config.n_hours
    temperature = 283.0 + 10.0 * annual + 4.0 * diurnal
    shortwave = np.maximum(diurnal, 0.0) * (550.0 + 250.0 * annual)
    pet = config.pet_amplitude * shortwave / 800.0
    return {
        "total_precipitation": precip,
        "temperature": temperature,
        "pressure": 101325.0 + 400.0 * annual,
        "longwave_radiation": 300.0 + 4.0 * (temperature - 283.0),
        "shortwave_radiation": shortwave,
        "specific_humidity": 0.008 + 0.004 * annual,
        "potential_energy": np.full(n, 1000.0),
        "potential_evaporation": pet,
        "convective_fraction": np.zeros(n),
        "wind_u": 2.0 + np.cos(2 * np.pi * np.arange(n) / 24.0),
        "wind_v": np.full(n, 0.5),
    }


def effective_rain(precip: np.ndarray, pet: np.ndarray) -> np.ndarray:
    return np.maximum(precip - pet, 0.0)


def equilibrium_storage(config: SynthBasinConfig, mean_in: float) -> Tuple[float, float]:
    """Storages whose outflow balances a constant inflow of ``mean_in`` mm/h."""
    fast = config.fast_fraction * mean_in / config.fast_k
    slow = (1.0 - config.fast_fraction) * mean_in / config.slow_k
    return fast, slow


def route(eff: np.ndarray, config: SynthBasinConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run both reservoirs; returns discharge and the two storage traces (mm)."""
    eq_fast, eq_slow = equilibrium_storage(config, float(eff.mean()))
    s_fast = eq_fast if config.init_fast is None else config.init_fast
    s_slow = eq_slow if config.init_slow is None else config.init_slow
    n = eff.size
    q = np.empty(n)
    fast_trace = np.empty(n)
    slow_trace = np.empty(n)
    kf, ks, ff = config.fast_k, config.slow_k, config.fast_fraction
    for t in range(n):
        s_fast += ff * eff[t]
        s_slow += (1.0 - ff) * eff[t]
        qf = kf * s_fast
        qs = ks * s_slow
        s_fast -= qf
        s_slow -= qs
        q[t] = qf + qs
        fast_trace[t] = s_fast
        slow_trace[t] = s_slow
    return q, fast_trace, slow_trace


def generate_basin(config: SynthBasinConfig, basin_id: str = "synth") -> BasinDataset:
    """Hourly forcings and discharge plus their daily aggregates."""
    config.validate()
    rng = SplitMix64(config.seed)
    precip = rain_events(config, rng)
    hourly_forcings = forcings(config, precip)
    eff = effective_rain(precip, hourly_forcings["potential_evaporation"])
    q, _, _ = route(eff, config)

    start = np.datetime64(config.start, "h")
    forcing_series = {name: RegularSeries(start, HOURLY, v) for name, v in hourly_forcings.items()}
    q_hourly = RegularSeries(start, HOURLY, q)
    daily_forcings = {name: aggregate(s, DAILY) for name, s in forcing_series.items()}
    attrs = config.static_attrs or tuple(getattr(config, n) for n in ATTRIBUTE_NAMES)
    static = {name: float(v) for name, v in zip(ATTRIBUTE_NAMES, attrs)}
    if len(attrs) != len(ATTRIBUTE_NAMES):
        static = {f"attr_{i}": float(v) for i, v in enumerate(attrs)}
    return BasinDataset(
        basin_id=basin_id,
        forcings={HOURLY: forcing_series, DAILY: daily_forcings},
        discharge={HOURLY: q_hourly, DAILY: aggregate(q_hourly, DAILY)},
        static=static,
    )


def fleet_configs(n_basins: int, base_seed: int, years: int = 12,
                  start: str = DEFAULT_START) -> List[SynthBasinConfig]:
    if n_basins < 1:
        raise ValueError("n_basins must be at least 1")
    rng = SplitMix64(base_seed)
    configs = []
    for _ in range(n_basins):
        draws = rng.uniform(len(ATTRIBUTE_NAMES))
        seed = int(rng.next_u64(1)[0])
        params = {}
        for (name, (lo, hi)), u in zip(FLEET_RANGES.items(), draws):
            params[name] = lo + (hi - lo) * float(u)
        attrs = tuple(params[n] for n in ATTRIBUTE_NAMES)
        configs.append(SynthBasinConfig(seed=seed, n_hours=years * 365 * 24, start=start,
                                        static_attrs=attrs, **params))
    return configs


def basin_ids(n_basins: int) -> List[str]:
    return [f"synth_{i:03d}" for i in range(n_basins)]


def generate_fleet(n_basins: int, base_seed: int, years: int = 12,
                   start: str = DEFAULT_START) -> List[BasinDataset]:
    """``n_basins`` basins whose static attributes are their generating parameters."""
    configs = fleet_configs(n_basins, base_seed, years, start)
    return [generate_basin(c, b) for c, b in zip(configs, basin_ids(n_basins))]


def write_fleet(out_dir: Path, n_basins: int, base_seed: int, years: int = 12,
                start: str = DEFAULT_START) -> List[BasinDataset]:
    """Generate a fleet and write it in the CSV layout with a ``fleet.json`` manifest."""
    out_dir = Path(out_dir)
    configs = fleet_configs(n_basins, base_seed, years, start)
    ids = basin_ids(n_basins)
    datasets = []
    for config, basin in zip(configs, ids):
        ds = generate_basin(config, basin)
        write_basin(ds, out_dir)
        datasets.append(ds)
    write_attributes(datasets, out_dir)
    manifest = {
        "generator": "two-reservoir linear bucket, SplitMix64",
        "base_seed": base_seed,
        "years": years,
        "basins": {b: {**asdict(c), "static_attrs": list(c.static_attrs)} for b, c in zip(ids, configs)},
    }
    (out_dir / "fleet.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return datasets
