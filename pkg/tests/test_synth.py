import json

import numpy as np
import pytest

from mtslstm.dataset import load_basins
from mtslstm.synth import (ATTRIBUTE_NAMES, FORCING_NAMES, SplitMix64, SynthBasinConfig, effective_rain,
                           fleet_configs, forcings, generate_basin, generate_fleet, rain_events, route,
                           write_fleet)
from mtslstm.timeseries import DAILY, HOURLY, aggregate

BASE = dict(n_hours=2 * 365 * 24, rain_event_rate=0.3, rain_event_depth=12.0, pet_amplitude=0.2,
            fast_k=0.08, slow_k=0.003, fast_fraction=0.6)


def test_splitmix64_reference_values():
    # first outputs for seed 0 of the published SplitMix64 reference
    out = SplitMix64(0).next_u64(3)
    assert [int(v) for v in out] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_uniform_range_and_stream_continuity():
    a = SplitMix64(5)
    first = a.uniform(4)
    rest = a.uniform(4)
    b = SplitMix64(5).uniform(8)
    assert np.array_equal(np.concatenate([first, rest]), b)
    assert np.all((b >= 0) & (b < 1))


def test_zero_rain_drains_initial_storage():
    cfg = SynthBasinConfig(seed=1, **{**BASE, "rain_event_rate": 0.0}, init_fast=20.0, init_slow=50.0)
    ds = generate_basin(cfg)
    q = ds.discharge[HOURLY].values
    assert np.all(np.diff(q) <= 0)
    assert q[-1] < 1e-3 * q[0]
    # everything that leaves was stored at the start
    fast_left = 20.0 * (1 - cfg.fast_k) ** cfg.n_hours
    slow_left = 50.0 * (1 - cfg.slow_k) ** cfg.n_hours
    assert q.sum() == pytest.approx(70.0 - fast_left - slow_left, rel=1e-10)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_mass_balance_and_non_negative(seed):
    cfg = SynthBasinConfig(seed=seed, **BASE, init_fast=5.0, init_slow=10.0)
    precip = rain_events(cfg, SplitMix64(seed))
    eff = effective_rain(precip, forcings(cfg, precip)["potential_evaporation"])
    q, fast, slow = route(eff, cfg)
    assert np.all(q >= 0) and np.all(fast >= 0) and np.all(slow >= 0)
    assert np.all(np.cumsum(q) <= np.cumsum(eff) + 15.0 + 1e-9)


def test_determinism_and_seed_sensitivity():
    a = generate_basin(SynthBasinConfig(seed=7, **BASE))
    b = generate_basin(SynthBasinConfig(seed=7, **BASE))
    c = generate_basin(SynthBasinConfig(seed=8, **BASE))
    for name in FORCING_NAMES:
        assert np.array_equal(a.forcings[HOURLY][name].values, b.forcings[HOURLY][name].values)
    assert np.array_equal(a.discharge[HOURLY].values, b.discharge[HOURLY].values)
    assert not np.array_equal(a.forcings[HOURLY]["total_precipitation"].values,
                              c.forcings[HOURLY]["total_precipitation"].values)


def test_invalid_configs():
    for bad in ({"fast_k": 1.0}, {"slow_k": 0.0}, {"fast_fraction": 1.5}, {"rain_event_depth": -1.0},
                {"n_hours": 365 * 24}):
        with pytest.raises(ValueError):
            generate_basin(SynthBasinConfig(seed=1, **{**BASE, **bad}))


def test_all_forcing_slots_present():
    ds = generate_basin(SynthBasinConfig(seed=1, **BASE))
    assert tuple(ds.forcings[HOURLY]) == FORCING_NAMES
    assert tuple(ds.forcings[DAILY]) == FORCING_NAMES


def test_fleet_properties():
    fleet = generate_fleet(10, 3, years=2)
    attrs = [tuple(d.static[n] for n in ATTRIBUTE_NAMES) for d in fleet]
    assert len(set(attrs)) == 10
    again = generate_fleet(10, 3, years=2)
    for a, b in zip(fleet, again):
        assert np.array_equal(a.discharge[HOURLY].values, b.discharge[HOURLY].values)
        # daily discharge is exactly the aggregate of the hourly series
        assert np.array_equal(a.discharge[DAILY].values, aggregate(a.discharge[HOURLY], DAILY).values)
    cfgs = fleet_configs(10, 3, years=2)
    for d, c in zip(fleet, cfgs):
        assert d.static["fast_k"] == c.fast_k


def test_write_fleet_layout_and_round_trip(tmp_path):
    written = write_fleet(tmp_path, 2, 5, years=2)
    assert (tmp_path / "attributes.csv").exists()
    manifest = json.loads((tmp_path / "fleet.json").read_text())
    assert set(manifest["basins"]) == {"synth_000", "synth_001"}
    hourly = (tmp_path / "discharge" / "1h" / "synth_000.csv").read_text().splitlines()
    assert hourly[0] == "timestamp,qobs_mm_per_hour"
    assert hourly[1].startswith("2000-10-01T00:00:00Z,")
    assert len(hourly) == 1 + 2 * 365 * 24
    loaded = load_basins(tmp_path)
    for a, b in zip(written, loaded):
        assert a.basin_id == b.basin_id
        assert np.array_equal(a.discharge[HOURLY].values, b.discharge[HOURLY].values)
        assert np.array_equal(a.forcings[DAILY]["temperature"].values, b.forcings[DAILY]["temperature"].values)
        assert a.static == b.static
