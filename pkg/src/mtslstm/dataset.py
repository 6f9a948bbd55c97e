"""Per-basin data container and the on-disk CSV layout.

Layout of a data directory::

    DIR/forcings/<scale>/<basin>.csv    timestamp + one column per forcing
    DIR/discharge/<scale>/<basin>.csv   timestamp + qobs_mm_per_hour
    DIR/attributes.csv                  basin_id + one column per static attribute
    DIR/fleet.json                      optional generator manifest

``<scale>`` is the step length in hours, e.g. ``1h`` or ``24h``. Timestamps are
ISO-8601 UTC strings such as ``1990-10-01T00:00:00Z`` marking the start of the
step. Missing discharge is an empty cell; forcings must be complete.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .timeseries import RegularSeries, Timescale, aggregate

LOGGER = logging.getLogger(__name__)

Q_COLUMN = "qobs_mm_per_hour"
TIMESTAMP = "timestamp"


class DataError(ValueError):
    """Malformed or incomplete basin data."""


@dataclass
class BasinDataset:
    basin_id: str
    forcings: Dict[Timescale, Dict[str, RegularSeries]]
    discharge: Dict[Timescale, RegularSeries]
    static: Dict[str, float] = field(default_factory=dict)

    @property
    def scales(self) -> List[Timescale]:
        return sorted(self.discharge, key=lambda s: -s.step_hours)

    def feature_names(self, scale: Timescale) -> List[str]:
        return list(self.forcings[scale])

    def inputs(self, scale: Timescale, names: Optional[Sequence[str]] = None) -> np.ndarray:
        """Forcing matrix of shape ``(n_steps, n_features)`` at ``scale``."""
        cols = self.forcings[scale]
        names = list(cols) if names is None else list(names)
        return np.column_stack([cols[n].values for n in names])

    def span(self, scale: Timescale):
        q = self.discharge[scale]
        return q.start, q.end

    def ensure_scale(self, scale: Timescale) -> None:
        """Derive ``scale`` by block-averaging the finest finer scale present."""
        if scale in self.discharge and scale in self.forcings:
            return
        finer = [s for s in self.discharge if s.step_hours < scale.step_hours
                 and scale.step_hours % s.step_hours == 0]
        if not finer:
            raise DataError(f"basin {self.basin_id}: no data to derive {scale.name}")
        src = min(finer, key=lambda s: s.step_hours)
        if scale not in self.discharge:
            self.discharge[scale] = aggregate(self.discharge[src], scale)
        if scale not in self.forcings:
            self.forcings[scale] = {n: aggregate(v, scale) for n, v in self.forcings[src].items()}


def format_timestamps(stamps: np.ndarray) -> List[str]:
    text = np.datetime_as_string(stamps.astype("datetime64[s]"), unit="s")
    return list(np.char.add(text, "Z"))


def _series_frame(stamps: np.ndarray, columns: Dict[str, np.ndarray]) -> pd.DataFrame:
    frame = pd.DataFrame({TIMESTAMP: format_timestamps(stamps)})
    for name, values in columns.items():
        frame[name] = values
    return frame


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-style floats round-trip exactly
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                       na_values=[""])


def write_basin(dataset: BasinDataset, root: Path) -> None:
    root = Path(root)
    for scale, cols in dataset.forcings.items():
        first = next(iter(cols.values()))
        frame = _series_frame(first.timestamps(), {n: s.values for n, s in cols.items()})
        write_csv(frame, root / "forcings" / scale.name / f"{dataset.basin_id}.csv")
    for scale, q in dataset.discharge.items():
        frame = _series_frame(q.timestamps(), {Q_COLUMN: q.values})
        write_csv(frame, root / "discharge" / scale.name / f"{dataset.basin_id}.csv")


def write_attributes(datasets: Iterable[BasinDataset], root: Path) -> None:
    rows = [{"basin_id": d.basin_id, **d.static} for d in datasets]
    write_csv(pd.DataFrame(rows), Path(root) / "attributes.csv")


def _parse_frame(frame: pd.DataFrame, path: Path):
    if frame.columns[0] != TIMESTAMP:
        raise DataError(f"{path}: first column must be '{TIMESTAMP}'")
    if len(frame) == 0:
        raise DataError(f"{path}: no rows")
    try:
        parsed = pd.to_datetime(frame[TIMESTAMP], utc=True).dt.tz_localize(None).to_numpy()
    except (ValueError, TypeError) as err:
        raise DataError(f"{path}: unparseable timestamps ({err})") from err
    stamps = parsed.astype("datetime64[h]")
    if np.any(stamps.astype(parsed.dtype) != parsed):
        raise DataError(f"{path}: timestamps must be aligned to whole hours")
    return stamps


def _check_regular(stamps: np.ndarray, scale: Timescale, path: Path) -> None:
    if stamps.size > 1 and np.any(np.diff(stamps) != scale.step):
        raise DataError(f"{path}: timestamps are not a gap-free {scale.name} grid")
    if not scale.is_boundary(stamps[0]):
        raise DataError(f"{path}: first timestamp {stamps[0]} is not on a {scale.name} boundary")


def load_basin(root: Path, basin_id: str, attributes: Optional[pd.DataFrame] = None) -> BasinDataset:
    """Read one basin from the CSV layout; every scale directory present is loaded."""
    root = Path(root)
    forcings: Dict[Timescale, Dict[str, RegularSeries]] = {}
    discharge: Dict[Timescale, RegularSeries] = {}
    for kind in ("forcings", "discharge"):
        base = root / kind
        if not base.is_dir():
            raise DataError(f"missing directory {base}")
        for scale_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            path = scale_dir / f"{basin_id}.csv"
            if not path.exists():
                continue
            scale = Timescale.parse(scale_dir.name)
            frame = read_csv(path)
            stamps = _parse_frame(frame, path)
            _check_regular(stamps, scale, path)
            if kind == "forcings":
                cols = {}
                for name in frame.columns[1:]:
                    values = frame[name].to_numpy(dtype=np.float64)
                    if np.isnan(values).any():
                        raise DataError(f"{path}: forcing '{name}' has gaps")
                    cols[name] = RegularSeries(stamps[0], scale, values)
                forcings[scale] = cols
            else:
                if Q_COLUMN not in frame.columns:
                    raise DataError(f"{path}: missing column {Q_COLUMN}")
                discharge[scale] = RegularSeries(stamps[0], scale, frame[Q_COLUMN].to_numpy(np.float64))
    if not discharge:
        raise DataError(f"no discharge files for basin {basin_id} under {root}")
    static: Dict[str, float] = {}
    if attributes is None and (root / "attributes.csv").exists():
        attributes = load_attributes(root)
    if attributes is not None and basin_id in attributes.index:
        static = {k: float(v) for k, v in attributes.loc[basin_id].items()}
    return BasinDataset(basin_id, forcings, discharge, static)


def load_attributes(root: Path) -> pd.DataFrame:
    frame = pd.read_csv(Path(root) / "attributes.csv", dtype={"basin_id": str},
                        float_precision="round_trip")
    return frame.set_index("basin_id")


def list_basins(root: Path) -> List[str]:
    root = Path(root)
    ids = set()
    for scale_dir in (root / "discharge").iterdir():
        if scale_dir.is_dir():
            ids.update(p.stem for p in scale_dir.glob("*.csv"))
    return sorted(ids)


def load_basins(root: Path, basins: Optional[Sequence[str]] = None) -> List[BasinDataset]:
    root = Path(root)
    basins = list_basins(root) if not basins else list(basins)
    attributes = load_attributes(root) if (root / "attributes.csv").exists() else None
    LOGGER.info("loading %d basins from %s", len(basins), root)
    return [load_basin(root, b, attributes) for b in basins]
