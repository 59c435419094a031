"""Cellular time series: ingestion, temporal downsampling, category aggregation,
log-standardization and time-of-day slicing."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = ("Social", "Work", "Gaming", "Streaming")

# local-hour windows, end exclusive
SLOTS = {
    "night": (0, 8),
    "morning": (8, 16),
    "afternoon": (16, 24),
}
SLOT_NAMES = ("night", "morning", "afternoon", "full")


class TrafficError(ValueError):
    pass


@dataclass(frozen=True)
class CellularTimeSeries:
    cell_id: int
    service_id: str
    start: datetime
    step: timedelta
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or len(v) < 1:
            raise TrafficError(f"cell {self.cell_id}/{self.service_id}: values must be a non-empty 1-d array")
        if np.any(v < 0):
            raise TrafficError(f"cell {self.cell_id}/{self.service_id}: negative traffic volume")
        if self.step <= timedelta(0):
            raise TrafficError(f"step must be positive, got {self.step}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


def downsample_sum(ts: CellularTimeSeries, target_step: timedelta) -> CellularTimeSeries:
    """Re-bin ``ts`` to ``target_step`` by summing the constituent bins."""
    ratio, rem = divmod(target_step, ts.step)
    if rem or ratio < 1:
        raise TrafficError(f"target step {target_step} is not a multiple of {ts.step} (remainder {rem})")
    partial = len(ts) % ratio
    if partial:
        raise TrafficError(
            f"cell {ts.cell_id}/{ts.service_id}: {len(ts)} samples leave a partial trailing bin "
            f"of {partial} samples at ratio {ratio}"
        )
    if ratio == 1:
        return ts
    binned = ts.values.reshape(-1, ratio).sum(axis=1)
    return replace(ts, step=target_step, values=binned)


@dataclass(frozen=True)
class CategoryMap:
    mapping: dict[str, str]
    categories: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise TrafficError(f"duplicate categories in {self.categories}")
        stray = set(self.mapping.values()) - set(self.categories)
        if stray:
            raise TrafficError(f"services mapped to unknown categories {sorted(stray)}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "CategoryMap":
        mapping, cats = {}, []
        for service, cat in pairs:
            mapping[service] = cat
            if cat not in cats:
                cats.append(cat)
        return cls(mapping, tuple(cats))

    @classmethod
    def from_text(cls, text: str) -> "CategoryMap":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrafficError(f"category map line {lineno}: expected service_id=category")
            service, cat = (s.strip() for s in line.split("=", 1))
            pairs.append((service, cat))
        return cls.from_pairs(pairs)

    @classmethod
    def read(cls, path: str | Path) -> "CategoryMap":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        # category order is recovered from first appearance, so emit grouped by category
        lines = [f"{s}={c}" for c in self.categories for s, cc in self.mapping.items() if cc == c]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MultivariateSeries:
    cell_id: int
    categories: tuple[str, ...]
    start: datetime
    step: timedelta
    values: np.ndarray  # (n_categories, k)
    normalized: bool = False
    slot: str = "full"
    excluded_services: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != len(self.categories):
            raise TrafficError(f"cell {self.cell_id}: values shape {v.shape} does not match categories")
        if not self.normalized and np.any(v < 0):
            raise TrafficError(f"cell {self.cell_id}: negative raw traffic")
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[1]


def aggregate_categories(
    series: Sequence[CellularTimeSeries], cmap: CategoryMap, strict: bool = False
) -> MultivariateSeries:
    """Sum each category's member services into one row.

    Unmapped services are dropped and listed in ``excluded_services``;
    with ``strict`` they raise instead.
    """
    if not series:
        raise TrafficError("no series to aggregate")
    ref = series[0]
    for ts in series[1:]:
        if ts.cell_id != ref.cell_id:
            raise TrafficError(f"mixed cells {ref.cell_id} and {ts.cell_id}")
        if (ts.start, ts.step, len(ts)) != (ref.start, ref.step, len(ref)):
            raise TrafficError(
                f"cell {ref.cell_id}: service {ts.service_id} misaligned with {ref.service_id}"
            )
    dtype = np.result_type(*[ts.values.dtype for ts in series])
    out = np.zeros((len(cmap.categories), len(ref)), dtype=dtype)
    index = {c: i for i, c in enumerate(cmap.categories)}
    excluded = []
    mapped = 0
    for ts in series:
        cat = cmap.mapping.get(ts.service_id)
        if cat is None:
            if strict:
                raise TrafficError(f"service {ts.service_id!r} has no category")
            excluded.append(ts.service_id)
            continue
        out[index[cat]] += ts.values
        mapped += 1
    if mapped == 0:
        raise TrafficError(f"cell {ref.cell_id}: none of the services maps to a category")
    if excluded:
        logger.debug("cell %s: %d unmapped services excluded", ref.cell_id, len(excluded))
    return MultivariateSeries(
        ref.cell_id, cmap.categories, ref.start, ref.step, out, excluded_services=tuple(excluded)
    )


@dataclass(frozen=True)
class NormStats:
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.loc, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(scale))):
            raise TrafficError("normalization stats must be finite")
        if np.any(scale <= 0):
            raise TrafficError("normalization scale must be positive")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    def to_dict(self) -> dict:
        return {"loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(np.array(d["loc"]), np.array(d["scale"]))


def fit_norm_stats(training: Sequence[MultivariateSeries], min_scale: float = 1e-6) -> NormStats:
    """Per-category mean and std of log1p(volume) pooled over the training cells."""
    stacked = np.concatenate([np.log1p(mv.values.astype(np.float64)) for mv in training], axis=1)
    return NormStats(stacked.mean(axis=1), np.maximum(stacked.std(axis=1), min_scale))


def normalize(mv: MultivariateSeries, stats: NormStats) -> MultivariateSeries:
    if mv.normalized:
        raise TrafficError(f"cell {mv.cell_id} is already normalized")
    z = (np.log1p(mv.values.astype(np.float64)) - stats.loc[:, None]) / stats.scale[:, None]
    return replace(mv, values=z, normalized=True)


def denormalize(mv: MultivariateSeries, stats: NormStats) -> MultivariateSeries:
    if not mv.normalized:
        raise TrafficError(f"cell {mv.cell_id} is not normalized")
    x = np.expm1(mv.values * stats.scale[:, None] + stats.loc[:, None])
    return replace(mv, values=np.maximum(x, 0.0), normalized=False)


def slot_mask(start: datetime, step: timedelta, k: int, slot: str) -> np.ndarray:
    if slot == "full":
        return np.ones(k, dtype=bool)
    if slot not in SLOTS:
        raise TrafficError(f"unknown slot {slot!r}; expected one of {SLOT_NAMES}")
    if start.tzinfo is None:
        raise TrafficError("slot slicing needs a timezone-aware start time")
    if step > timedelta(hours=1) or timedelta(hours=1) % step:
        raise TrafficError(f"step {step} does not align with hour boundaries")
    offset = timedelta(minutes=start.minute, seconds=start.second, microseconds=start.microsecond)
    if offset % step:
        raise TrafficError(f"start {start.isoformat()} is not aligned to the {step} grid")
    per_hour = timedelta(hours=1) // step
    first = start.hour * per_hour + offset // step
    hours = ((first + np.arange(k)) // per_hour) % 24
    lo, hi = SLOTS[slot]
    return (hours >= lo) & (hours < hi)


def slice_time_slot(mv: MultivariateSeries, slot: str) -> MultivariateSeries:
    """Keep the samples whose local start time falls in ``slot``.

    The kept samples are concatenated in time order; ``start`` becomes the
    first kept sample's timestamp.
    """
    mask = slot_mask(mv.start, mv.step, mv.length, slot)
    if slot == "full":
        return mv
    if not mask.any():
        raise TrafficError(f"cell {mv.cell_id}: no samples fall in slot {slot!r}")
    first = int(np.argmax(mask))
    return replace(mv, values=mv.values[:, mask], start=mv.start + first * mv.step, slot=slot)


# --- interchange -----------------------------------------------------------

@dataclass(frozen=True)
class TrafficMeta:
    start: datetime
    step: timedelta
    k: int
    services: tuple[str, ...]

    def timestamps(self) -> list[str]:
        return [(self.start + i * self.step).isoformat() for i in range(self.k)]

    def to_dict(self) -> dict:
        return {
            "start": self.start.isoformat(),
            "step_seconds": int(self.step.total_seconds()),
            "k": self.k,
            "services": list(self.services),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrafficMeta":
        return cls(
            datetime.fromisoformat(d["start"]),
            timedelta(seconds=d["step_seconds"]),
            int(d["k"]),
            tuple(d["services"]),
        )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_traffic(
    volumes: Mapping[int, Mapping[str, np.ndarray]], meta: TrafficMeta, csv_path: str | Path, meta_path: str | Path
) -> None:
    """Write ``volumes[cell_id][service_id]`` (length-k arrays) as long-form CSV plus sidecar."""
    stamps = meta.timestamps()
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell_id", "service_id", "timestamp_iso8601", "volume"])
        for cell_id in sorted(volumes):
            for service in meta.services:
                vals = volumes[cell_id][service]
                if len(vals) != meta.k:
                    raise TrafficError(f"cell {cell_id}/{service}: {len(vals)} samples, expected {meta.k}")
                for t, v in zip(stamps, vals.tolist()):
                    w.writerow([cell_id, service, t, _fmt(v)])
    Path(meta_path).write_text(json.dumps(meta.to_dict(), indent=2) + "\n")


def read_traffic(csv_path: str | Path, meta_path: str | Path) -> dict[int, list[CellularTimeSeries]]:
    """Load the long-form traffic CSV; every (cell, service) must cover all k timestamps."""
    meta = TrafficMeta.from_dict(json.loads(Path(meta_path).read_text()))
    df = pd.read_csv(
        csv_path,
        dtype={"cell_id": np.int64, "service_id": str, "timestamp_iso8601": str},
        float_precision="round_trip",
    )
    expected = {"cell_id", "service_id", "timestamp_iso8601", "volume"}
    if set(df.columns) != expected:
        raise TrafficError(f"{csv_path}: columns {list(df.columns)} != {sorted(expected)}")
    t_index = {s: i for i, s in enumerate(meta.timestamps())}
    ti = df["timestamp_iso8601"].map(t_index)
    if ti.isna().any():
        bad = df.loc[ti.isna(), "timestamp_iso8601"].iloc[0]
        raise TrafficError(f"{csv_path}: timestamp {bad} is off the {meta.step} grid starting {meta.start}")
    s_index = {s: i for i, s in enumerate(meta.services)}
    si = df["service_id"].map(s_index)
    if si.isna().any():
        raise TrafficError(f"{csv_path}: service {df.loc[si.isna(), 'service_id'].iloc[0]!r} not in sidecar")
    cells = np.unique(df["cell_id"].to_numpy())
    ci = np.searchsorted(cells, df["cell_id"].to_numpy())
    vol = df["volume"].to_numpy()
    dtype = np.int64 if np.issubdtype(vol.dtype, np.integer) else np.float64
    cube = np.zeros((len(cells), len(meta.services), meta.k), dtype=dtype)
    seen = np.zeros(cube.shape, dtype=np.int32)
    idx = (ci, si.to_numpy(dtype=np.int64), ti.to_numpy(dtype=np.int64))
    cube[idx] = vol
    np.add.at(seen, idx, 1)
    if np.any(seen != 1):
        c, s, t = np.argwhere(seen != 1)[0]
        what = "missing" if seen[c, s, t] == 0 else "duplicated"
        raise TrafficError(
            f"{csv_path}: {what} sample for cell {cells[c]}, service {meta.services[s]}, "
            f"timestamp {meta.timestamps()[t]}"
        )
    out = {}
    for i, cell in enumerate(cells.tolist()):
        out[cell] = [
            CellularTimeSeries(cell, svc, meta.start, meta.step, cube[i, j]) for j, svc in enumerate(meta.services)
        ]
    return out
