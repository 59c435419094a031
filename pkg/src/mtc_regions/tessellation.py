"""Operator cell grid, target region tessellation, and region neighborhood graph."""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon, mapping, shape
from shapely.strtree import STRtree

logger = logging.getLogger(__name__)

AREA_EPS = 1e-6  # m^2, minimum overlap counted as intersection
LENGTH_EPS = 1e-6  # m, minimum shared boundary for adjacency
AREA_RTOL = 1e-3


class TessellationError(ValueError):
    pass


@dataclass(frozen=True)
class MtcGrid:
    """Square-cell grid anchored at ``origin`` (lower-left corner).

    Cell ids are row-major: ``row * n_cols + col`` with row 0 at the bottom.
    """

    origin: tuple[float, float]
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise TessellationError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise TessellationError(f"grid must have positive dimensions, got {self.n_rows}x{self.n_cols}")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.n_cols * self.cell_size, y0 + self.n_rows * self.cell_size)

    def cell_bounds(self, cell_id: int) -> tuple[float, float, float, float]:
        if not 0 <= cell_id < self.n_cells:
            raise TessellationError(f"cell id {cell_id} outside [0, {self.n_cells})")
        row, col = divmod(cell_id, self.n_cols)
        x0 = self.origin[0] + col * self.cell_size
        y0 = self.origin[1] + row * self.cell_size
        return (x0, y0, x0 + self.cell_size, y0 + self.cell_size)

    def cell_polygon(self, cell_id: int) -> Polygon:
        return shapely.box(*self.cell_bounds(cell_id))

    def cell_center(self, cell_id: int) -> tuple[float, float]:
        x0, y0, x1, y1 = self.cell_bounds(cell_id)
        return ((x0 + x1) / 2, (y0 + y1) / 2)

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MtcGrid":
        return cls(
            origin=(float(d["origin"][0]), float(d["origin"][1])),
            cell_size=float(d["cell_size"]),
            n_rows=int(d["n_rows"]),
            n_cols=int(d["n_cols"]),
        )


@dataclass(frozen=True)
class Region:
    region_id: str
    polygon: Polygon | MultiPolygon
    area: float


@dataclass(frozen=True)
class TargetTessellation:
    regions: tuple[Region, ...]

    def __post_init__(self):
        seen = set()
        for r in self.regions:
            if r.region_id in seen:
                raise TessellationError(f"duplicate region id {r.region_id!r}")
            seen.add(r.region_id)
            computed = r.polygon.area
            if computed <= AREA_EPS:
                raise TessellationError(f"degenerate region {r.region_id!r}: zero area")
            if abs(r.area - computed) > AREA_RTOL * computed:
                raise TessellationError(
                    f"region {r.region_id!r}: declared area {r.area} differs from polygon area {computed}"
                )

    @classmethod
    def from_polygons(cls, items: Iterable[tuple[str, Polygon | MultiPolygon]]) -> "TargetTessellation":
        return cls(tuple(Region(rid, poly, poly.area) for rid, poly in items))

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    def region(self, region_id: str) -> Region:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise KeyError(region_id)

    def areas(self) -> dict[str, float]:
        return {r.region_id: r.area for r in self.regions}

    def check_non_overlapping(self, tol: float = AREA_EPS) -> None:
        polys = [r.polygon for r in self.regions]
        tree = STRtree(polys)
        for i, j in zip(*tree.query(polys, predicate="intersects")):
            if i < j:
                overlap = polys[i].intersection(polys[j]).area
                if overlap > tol:
                    raise TessellationError(
                        f"regions {self.regions[i].region_id!r} and {self.regions[j].region_id!r} "
                        f"overlap by {overlap:.6g} m^2"
                    )


@dataclass(frozen=True)
class IntersectionMap:
    cells: dict[str, list[int]]
    empty_regions: list[str] = field(default_factory=list)


def intersect_grid(grid: MtcGrid, tess: TargetTessellation, area_eps: float = AREA_EPS) -> IntersectionMap:
    """Map each region to the ascending ids of the grid cells it overlaps with positive area."""
    x0, y0 = grid.origin
    s = grid.cell_size
    cells: dict[str, list[int]] = {}
    empty = []
    for r in tess.regions:
        bx0, by0, bx1, by1 = r.polygon.bounds
        c0 = max(int(np.floor((bx0 - x0) / s)), 0)
        c1 = min(int(np.ceil((bx1 - x0) / s)), grid.n_cols)
        r0 = max(int(np.floor((by0 - y0) / s)), 0)
        r1 = min(int(np.ceil((by1 - y0) / s)), grid.n_rows)
        ids = [row * grid.n_cols + col for row in range(r0, r1) for col in range(c0, c1)]
        if ids:
            boxes = shapely.box(
                *np.array([grid.cell_bounds(i) for i in ids]).T
            )
            areas = shapely.area(shapely.intersection(boxes, r.polygon))
            ids = [i for i, a in zip(ids, areas) if a > area_eps]
        if not ids:
            logger.warning("region %s does not intersect any grid cell", r.region_id)
            empty.append(r.region_id)
        cells[r.region_id] = ids
    return IntersectionMap(cells, empty)


def majority_region(grid: MtcGrid, tess: TargetTessellation) -> dict[int, str]:
    """Region containing each cell's center; cells outside every region are absent."""
    polys = [r.polygon for r in tess.regions]
    tree = STRtree(polys)
    centers = shapely.points([grid.cell_center(i) for i in range(grid.n_cells)])
    out = {}
    for cell_idx, reg_idx in zip(*tree.query(centers, predicate="intersects")):
        out.setdefault(int(cell_idx), tess.regions[reg_idx].region_id)
    return out


@dataclass(frozen=True)
class RegionAdjacency:
    neighbors: dict[str, frozenset[str]]
    rule: str = "shared-boundary"

    def __post_init__(self):
        for a, ns in self.neighbors.items():
            if a in ns:
                raise TessellationError(f"self-loop on region {a!r}")
            for b in ns:
                if a not in self.neighbors.get(b, ()):
                    raise TessellationError(f"asymmetric adjacency between {a!r} and {b!r}")

    @property
    def region_ids(self) -> list[str]:
        return sorted(self.neighbors)

    @classmethod
    def from_edges(cls, nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> "RegionAdjacency":
        nb: dict[str, set[str]] = {n: set() for n in nodes}
        for a, b in edges:
            nb[a].add(b)
            nb[b].add(a)
        return cls({k: frozenset(v) for k, v in nb.items()})


def shared_boundary_length(a: Polygon | MultiPolygon, b: Polygon | MultiPolygon) -> float:
    return a.boundary.intersection(b.boundary).length


def build_adjacency(tess: TargetTessellation, length_eps: float = LENGTH_EPS) -> RegionAdjacency:
    """Rook adjacency: regions sharing a boundary segment longer than ``length_eps``."""
    polys = [r.polygon for r in tess.regions]
    ids = [r.region_id for r in tess.regions]
    tree = STRtree(polys)
    edges = []
    for i, j in zip(*tree.query(polys, predicate="intersects")):
        if i < j and shared_boundary_length(polys[i], polys[j]) > length_eps:
            edges.append((ids[i], ids[j]))
    return RegionAdjacency.from_edges(ids, edges)


def graph_distances(adj: RegionAdjacency, source: str) -> dict[str, int]:
    if source not in adj.neighbors:
        raise KeyError(f"unknown region {source!r}")
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj.neighbors[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_neighbors(adj: RegionAdjacency, anchor: str, hops: int) -> set[str]:
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    return {r for r, d in graph_distances(adj, anchor).items() if 1 <= d <= hops}


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


class NoNegativeError(TessellationError):
    pass


def sample_triplet(
    adj: RegionAdjacency, anchor: str, hops: int, rng: np.random.Generator | int
) -> Triplet | None:
    """Draw a positive within ``hops`` of ``anchor`` and a negative beyond it.

    Returns None for an anchor with no region within reach. Regions in
    other connected components count as negatives.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    positives = sorted(hop_neighbors(adj, anchor, hops))
    if not positives:
        logger.info("skipping isolated anchor %s", anchor)
        return None
    excluded = set(positives) | {anchor}
    negatives = [r for r in adj.region_ids if r not in excluded]
    if not negatives:
        raise NoNegativeError(f"anchor {anchor!r} reaches every region within {hops} hops")
    p = positives[int(rng.integers(len(positives)))]
    n = negatives[int(rng.integers(len(negatives)))]
    return Triplet(anchor, p, n)


def eligible_anchors(adj: RegionAdjacency, hops: int) -> list[str]:
    out = []
    n = len(adj.neighbors)
    for r in adj.region_ids:
        k = len(hop_neighbors(adj, r, hops))
        if 0 < k < n - 1:
            out.append(r)
    return out


# --- interchange -----------------------------------------------------------

def read_regions_geojson(path: str | Path) -> TargetTessellation:
    with open(path) as f:
        doc = json.load(f)
    items = []
    for feat in doc["features"]:
        rid = str(feat["properties"]["region_id"])
        geom = shape(feat["geometry"])
        if not isinstance(geom, (Polygon, MultiPolygon)):
            raise TessellationError(f"region {rid!r}: unsupported geometry {geom.geom_type}")
        items.append((rid, geom))
    return TargetTessellation.from_polygons(items)


def regions_feature_collection(
    tess: TargetTessellation, properties: Mapping[str, Mapping] | None = None
) -> dict:
    feats = []
    for r in tess.regions:
        props = {"region_id": r.region_id, "area_m2": r.area}
        if properties is not None:
            props.update(properties[r.region_id])
        feats.append({"type": "Feature", "properties": props, "geometry": mapping(r.polygon)})
    return {"type": "FeatureCollection", "features": feats}


def write_intersection_csv(imap: IntersectionMap, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["region_id", "cell_id"])
        for rid, ids in imap.cells.items():
            for c in ids:
                w.writerow([rid, c])


def read_intersection_csv(path: str | Path, region_ids: Iterable[str] | None = None) -> IntersectionMap:
    cells: dict[str, list[int]] = {rid: [] for rid in (region_ids or [])}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            cells.setdefault(row["region_id"], []).append(int(row["cell_id"]))
    for ids in cells.values():
        ids.sort()
    return IntersectionMap(cells, [r for r, ids in cells.items() if not ids])
