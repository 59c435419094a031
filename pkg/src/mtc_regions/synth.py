"""Synthetic cities with known ground truth.

A city is a square grid of cells under a random Voronoi tessellation of
regions. Regions are grouped into spatially contiguous zones, one
archetype per zone, so nearby regions tend to behave alike. Each cell
inherits the archetype of the region holding its center and gets hourly
traffic

    volume[c, t] = base * profile[c][hour(t)] * weekend(t) * noise[c, t]

with mean-one multiplicative lognormal noise. With ``slot_dependent`` set,
every time slot (night, morning, afternoon) draws its own zoning, so the
archetype driving a cell's traffic changes with the time of day.

Ground-truth labels per region:

* land use: ``Dirichlet(concentration * mean)`` around the archetype's
  land-use mean (floored at 0.01 and renormalized before sampling);
* density: ``median * exp(sigma * N(0, 1))`` people/km^2.

Labels follow the region's primary archetype, which is the morning
zoning in slot-dependent cities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import MultiPoint

from . import seeding
from .io_utils import sha256_file
from .tessellation import MtcGrid, TargetTessellation, intersect_grid, majority_region, regions_feature_collection
from .traffic import DEFAULT_CATEGORIES, SLOTS, CategoryMap, TrafficMeta, write_traffic

LANDUSE_CATEGORIES = ("residential", "commercial", "industrial", "green")
SLOT_ORDER = ("night", "morning", "afternoon")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class Archetype:
    name: str
    profiles: np.ndarray  # (n_categories, 24) hourly weights
    base_volume: float
    weekend_multiplier: float
    landuse_mean: tuple[float, ...]
    density_median: float

    def __post_init__(self):
        p = np.asarray(self.profiles, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 24:
            raise SynthError(f"archetype {self.name}: profiles need 24 hourly entries per category")
        if np.any(p < 0) or np.any(p.max(axis=1) <= 0):
            raise SynthError(f"archetype {self.name}: each category needs a positive, non-negative profile")
        if self.base_volume <= 0 or self.weekend_multiplier <= 0:
            raise SynthError(f"archetype {self.name}: base volume and weekend multiplier must be positive")
        object.__setattr__(self, "profiles", p)


def _bumps(floor: float, *bumps: tuple[float, float, float]) -> np.ndarray:
    """Hourly curve: ``floor`` plus circular Gaussian bumps (center hour, width, amplitude)."""
    h = np.arange(24)
    out = np.full(24, floor, dtype=np.float64)
    for center, width, amp in bumps:
        d = np.minimum(np.abs(h - center), 24 - np.abs(h - center))
        out += amp * np.exp(-0.5 * (d / width) ** 2)
    return out


def default_archetypes() -> tuple[Archetype, ...]:
    # rows follow DEFAULT_CATEGORIES: Social, Work, Gaming, Streaming
    return (
        Archetype(
            "residential",
            np.stack([
                _bumps(0.2, (8, 1.5, 0.6), (20, 2.5, 1.2)),
                _bumps(0.05, (9, 2.0, 0.3)),
                _bumps(0.1, (21, 2.0, 0.8)),
                _bumps(0.3, (22, 3.0, 2.0)),
            ]),
            base_volume=50.0, weekend_multiplier=1.2,
            landuse_mean=(0.75, 0.1, 0.05, 0.1), density_median=20000.0,
        ),
        Archetype(
            "office",
            np.stack([
                _bumps(0.05, (12.5, 3.0, 0.8)),
                _bumps(0.02, (11, 3.5, 2.5)),
                _bumps(0.01, (13, 1.0, 0.1)),
                _bumps(0.02, (13, 2.0, 0.3)),
            ]),
            base_volume=80.0, weekend_multiplier=0.4,
            landuse_mean=(0.1, 0.75, 0.1, 0.05), density_median=3000.0,
        ),
        Archetype(
            "nightlife",
            np.stack([
                _bumps(0.3, (1, 3.0, 2.0), (18, 2.0, 0.5)),
                _bumps(0.05, (15, 3.0, 0.2)),
                _bumps(0.2, (2, 3.0, 1.5)),
                _bumps(0.1, (0, 3.0, 0.6)),
            ]),
            base_volume=60.0, weekend_multiplier=1.6,
            landuse_mean=(0.35, 0.5, 0.05, 0.1), density_median=9000.0,
        ),
        Archetype(
            "leisure",
            np.stack([
                _bumps(0.1, (15, 3.0, 1.0)),
                _bumps(0.02, (12, 3.0, 0.05)),
                _bumps(0.05, (16, 2.5, 0.4)),
                _bumps(0.05, (14, 3.0, 0.2)),
            ]),
            base_volume=12.0, weekend_multiplier=1.8,
            landuse_mean=(0.05, 0.05, 0.05, 0.85), density_median=600.0,
        ),
    )


@dataclass(frozen=True)
class CitySpec:
    n_rows: int = 16
    n_cols: int = 16
    cell_size: float = 100.0
    n_regions: int = 32
    days: int = 14
    noise_sigma: float = 0.2
    density_sigma: float = 0.2
    landuse_concentration: float = 50.0
    slot_dependent: bool = False
    start: datetime = datetime(2019, 3, 18, tzinfo=timezone(timedelta(hours=1)))
    archetypes: tuple[Archetype, ...] = field(default_factory=default_archetypes)
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    landuse_categories: tuple[str, ...] = LANDUSE_CATEGORIES

    def validate(self) -> None:
        if self.days < 1:
            raise SynthError(f"days must be >= 1, got {self.days}")
        if len(self.archetypes) < 2:
            raise SynthError("at least two archetypes are required")
        if self.n_regions < len(self.archetypes):
            raise SynthError(f"{self.n_regions} regions cannot host {len(self.archetypes)} archetypes")
        if self.n_regions > self.n_rows * self.n_cols:
            raise SynthError("more regions than grid cells")
        if self.noise_sigma < 0 or self.density_sigma < 0 or self.landuse_concentration <= 0:
            raise SynthError("noise levels must be >= 0 and the land-use concentration > 0")
        for a in self.archetypes:
            if a.profiles.shape[0] != len(self.categories):
                raise SynthError(f"archetype {a.name} has {a.profiles.shape[0]} categories")
            if len(a.landuse_mean) != len(self.landuse_categories):
                raise SynthError(f"archetype {a.name} land-use mean has wrong length")


@dataclass(frozen=True)
class SyntheticCity:
    spec: CitySpec
    seed: int
    grid: MtcGrid
    tessellation: TargetTessellation
    region_archetype: dict[str, int]
    slot_archetype: dict[str, dict[str, int]]
    cell_region: dict[int, str]
    landuse: dict[str, np.ndarray]
    density: dict[str, float]
    volumes: dict[int, dict[str, np.ndarray]]  # cell -> category -> hourly series

    @property
    def meta(self) -> TrafficMeta:
        return TrafficMeta(self.spec.start, timedelta(hours=1), self.spec.days * 24, self.spec.categories)

    @property
    def category_map(self) -> CategoryMap:
        return CategoryMap.from_pairs((c, c) for c in self.spec.categories)

    def archetype_labels(self, slot: str = "full") -> dict[str, int]:
        if slot == "full":
            return dict(self.region_archetype)
        return dict(self.slot_archetype[slot])

    def cell_matrix(self, cell_id: int) -> np.ndarray:
        return np.stack([self.volumes[cell_id][c] for c in self.spec.categories])


def _seed_points(spec: CitySpec, rng: np.random.Generator) -> np.ndarray:
    w = spec.n_cols * spec.cell_size
    h = spec.n_rows * spec.cell_size
    min_dist = 0.5 * np.sqrt(w * h / spec.n_regions)
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < spec.n_regions:
        p = rng.uniform((0, 0), (w, h))
        attempts += 1
        if attempts > 10000 * spec.n_regions:
            raise SynthError("could not place region seeds; reduce n_regions")
        if all(np.hypot(*(p - q)) >= min_dist for q in pts):
            pts.append(p)
    return np.array(pts)


def _voronoi(points: np.ndarray, bounds: tuple[float, float, float, float]) -> list:
    frame = shapely.box(*bounds)
    cells = shapely.voronoi_polygons(MultiPoint(points), extend_to=frame)
    polys = [None] * len(points)
    for g in cells.geoms:
        clipped = g.intersection(frame)
        for i, p in enumerate(points):
            if polys[i] is None and g.contains(shapely.Point(p)):
                polys[i] = shapely.set_precision(clipped, 1e-6)
                break
    if any(p is None for p in polys):
        raise SynthError("voronoi construction lost a region")
    return polys


def _zoning(points: np.ndarray, n_archetypes: int, rng: np.random.Generator) -> np.ndarray:
    """Archetype index per seed point: farthest-point zone centers, nearest-center assignment."""
    centers = [int(rng.integers(len(points)))]
    d = np.hypot(*(points - points[centers[0]]).T)
    while len(centers) < n_archetypes:
        nxt = int(np.argmax(d))
        centers.append(nxt)
        d = np.minimum(d, np.hypot(*(points - points[nxt]).T))
    order = rng.permutation(n_archetypes)
    dist = np.stack([np.hypot(*(points - points[c]).T) for c in centers], axis=1)
    return order[np.argmin(dist, axis=1)]


def generate_city(spec: CitySpec, seed: int) -> SyntheticCity:
    spec.validate()
    grid = MtcGrid((0.0, 0.0), spec.cell_size, spec.n_rows, spec.n_cols)
    points = _seed_points(spec, seeding.rng(seed, "region-seeds"))
    polys = _voronoi(points, grid.bounds)
    region_ids = [f"R{i:03d}" for i in range(spec.n_regions)]
    tess = TargetTessellation.from_polygons(zip(region_ids, polys))

    imap = intersect_grid(grid, tess)
    if imap.empty_regions:
        raise SynthError(f"regions without cells: {imap.empty_regions}")
    cell_region = majority_region(grid, tess)
    if len(cell_region) != grid.n_cells:
        raise SynthError("some cell centers fall outside every region")

    n_arch = len(spec.archetypes)
    if spec.slot_dependent:
        slot_zones = {s: _zoning(points, n_arch, seeding.rng(seed, "zoning", s)) for s in SLOT_ORDER}
        primary = slot_zones["morning"]
    else:
        primary = _zoning(points, n_arch, seeding.rng(seed, "zoning"))
        slot_zones = {s: primary for s in SLOT_ORDER}
    rid_index = {rid: i for i, rid in enumerate(region_ids)}
    region_archetype = {rid: int(primary[i]) for i, rid in enumerate(region_ids)}
    slot_archetype = {s: {rid: int(z[i]) for i, rid in enumerate(region_ids)} for s, z in slot_zones.items()}

    k = spec.days * 24
    times = [spec.start + timedelta(hours=t) for t in range(k)]
    hour = np.array([t.hour for t in times])
    weekend = np.array([t.weekday() >= 5 for t in times])
    slot_of_hour = np.empty(24, dtype=np.int64)
    for si, s in enumerate(SLOT_ORDER):
        lo, hi = SLOTS[s]
        slot_of_hour[lo:hi] = si
    zones = np.stack([slot_zones[s] for s in SLOT_ORDER])  # (3, n_regions)

    profiles = np.stack([a.profiles for a in spec.archetypes])  # (A, C, 24)
    base = np.array([a.base_volume for a in spec.archetypes])
    wk = np.array([a.weekend_multiplier for a in spec.archetypes])
    sigma = spec.noise_sigma
    volumes = {}
    for cell in range(grid.n_cells):
        arch_t = zones[slot_of_hour[hour], rid_index[cell_region[cell]]]  # (k,)
        clean = base[arch_t] * profiles[arch_t, :, hour].T * np.where(weekend, wk[arch_t], 1.0)
        if sigma > 0:
            z = seeding.rng(seed, "cell-noise", cell).standard_normal(clean.shape)
            clean = clean * np.exp(sigma * z - 0.5 * sigma**2)
        volumes[cell] = {c: clean[i] for i, c in enumerate(spec.categories)}

    lrng = seeding.rng(seed, "landuse")
    drng = seeding.rng(seed, "density")
    landuse, density = {}, {}
    for rid in region_ids:
        a = spec.archetypes[region_archetype[rid]]
        mean = np.maximum(np.asarray(a.landuse_mean, dtype=np.float64), 0.01)
        mean /= mean.sum()
        dist = lrng.dirichlet(spec.landuse_concentration * mean)
        landuse[rid] = dist / dist.sum()
        density[rid] = float(a.density_median * np.exp(spec.density_sigma * drng.standard_normal()))

    return SyntheticCity(
        spec, seed, grid, tess, region_archetype, slot_archetype, cell_region, landuse, density, volumes
    )


# --- export ----------------------------------------------------------------

CITY_FILES = (
    "traffic.csv",
    "traffic_meta.json",
    "categories.txt",
    "grid.json",
    "regions.geojson",
    "landuse_truth.csv",
    "density_truth.csv",
    "archetype_truth.csv",
)


def write_landuse_csv(labels: dict[str, np.ndarray], path: str | Path) -> None:
    k = len(next(iter(labels.values())))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["region_id"] + [f"cat_{i + 1}" for i in range(k)])
        for rid, dist in labels.items():
            w.writerow([rid] + [repr(float(x)) for x in dist])


def write_density_csv(labels: dict[str, float], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["region_id", "people_per_km2"])
        for rid, v in labels.items():
            w.writerow([rid, repr(float(v))])


def export_city(city: SyntheticCity, directory: str | Path) -> dict:
    """Write the city's interchange files and a manifest of their hashes."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    write_traffic(city.volumes, city.meta, out / "traffic.csv", out / "traffic_meta.json")
    (out / "categories.txt").write_text(city.category_map.to_text())
    (out / "grid.json").write_text(json.dumps(city.grid.to_dict(), indent=2) + "\n")
    fc = regions_feature_collection(city.tessellation)
    (out / "regions.geojson").write_text(json.dumps(fc) + "\n")
    write_landuse_csv(city.landuse, out / "landuse_truth.csv")
    write_density_csv(city.density, out / "density_truth.csv")
    names = [a.name for a in city.spec.archetypes]
    with open(out / "archetype_truth.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["region_id", "archetype", *SLOT_ORDER])
        for rid in city.tessellation.region_ids:
            w.writerow(
                [rid, names[city.region_archetype[rid]]]
                + [names[city.slot_archetype[s][rid]] for s in SLOT_ORDER]
            )
    manifest = {
        "seed": city.seed,
        "archetypes": names,
        "categories": list(city.spec.categories),
        "landuse_categories": list(city.spec.landuse_categories),
        "files": {name: sha256_file(out / name) for name in CITY_FILES},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_landuse_csv(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[0] != "region_id":
            raise ValueError(f"{path}: first column must be region_id")
        for row in r:
            out[row[0]] = np.array([float(x) for x in row[1:]])
    return out


def read_density_csv(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as f:
        return {row["region_id"]: float(row["people_per_km2"]) for row in csv.DictReader(f)}


def read_archetype_csv(path: str | Path) -> dict[str, dict[str, str]]:
    """``{slot: {region_id: archetype}}`` with slot "full" for the primary column."""
    out: dict[str, dict[str, str]] = {"full": {}, **{s: {} for s in SLOT_ORDER}}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out["full"][row["region_id"]] = row["archetype"]
            for s in SLOT_ORDER:
                out[s][row["region_id"]] = row[s]
    return out


def mean_daily_profiles(city: SyntheticCity, cells: Sequence[int] | None = None) -> np.ndarray:
    """(n_cells, n_categories, 24) average over days of each cell's hourly matrix."""
    cells = range(city.grid.n_cells) if cells is None else cells
    mats = np.stack([city.cell_matrix(c) for c in cells])
    return mats.reshape(mats.shape[0], mats.shape[1], city.spec.days, 24).mean(axis=2)
