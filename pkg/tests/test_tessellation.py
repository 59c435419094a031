import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import MultiPolygon, Polygon, box

from mtc_regions.synth import _voronoi
from mtc_regions.tessellation import (
    MtcGrid,
    NoNegativeError,
    RegionAdjacency,
    TargetTessellation,
    TessellationError,
    build_adjacency,
    eligible_anchors,
    graph_distances,
    hop_neighbors,
    intersect_grid,
    read_intersection_csv,
    read_regions_geojson,
    regions_feature_collection,
    sample_triplet,
    write_intersection_csv,
)

from conftest import chain, square_grid_tessellation


# --- oracles ---------------------------------------------------------------

def shoelace(pts):
    if len(pts) < 3:
        return 0.0
    s = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        s += x0 * y1 - x1 * y0
    return abs(s) / 2


def clip_convex(subject, clip):
    """Sutherland-Hodgman clip of a polygon by a convex counter-clockwise polygon."""

    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0

    def cross_point(p, q, a, b):
        x1, y1, x2, y2 = *p, *q
        x3, y3, x4, y4 = *a, *b
        den = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
        t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / den
        return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))

    out = list(subject)
    for a, b in zip(clip, clip[1:] + clip[:1]):
        inp, out = out, []
        for i, p in enumerate(inp):
            q = inp[i - 1]
            if inside(p, a, b):
                if not inside(q, a, b):
                    out.append(cross_point(q, p, a, b))
                out.append(p)
            elif inside(q, a, b):
                out.append(cross_point(q, p, a, b))
        if not out:
            break
    return out


def collinear_overlap(s1, s2, tol=1e-9):
    (ax, ay), (bx, by) = s1
    (cx, cy), (dx, dy) = s2
    ux, uy = bx - ax, by - ay
    L = np.hypot(ux, uy)
    # both endpoints of s2 must lie on the line through s1
    for px, py in ((cx, cy), (dx, dy)):
        if abs(ux * (py - ay) - uy * (px - ax)) / L > tol:
            return 0.0
    t = sorted([((cx - ax) * ux + (cy - ay) * uy) / L, ((dx - ax) * ux + (dy - ay) * uy) / L])
    return max(0.0, min(L, t[1]) - max(0.0, t[0]))


def ring_segments(coords):
    coords = list(coords)
    return list(zip(coords, coords[1:]))


def boundary_overlap_oracle(p1: Polygon, p2: Polygon) -> float:
    return sum(
        collinear_overlap(s1, s2)
        for s1 in ring_segments(p1.exterior.coords)
        for s2 in ring_segments(p2.exterior.coords)
    )


# --- grid --------------------------------------------------------------------

def test_grid_cells_tile_the_rectangle():
    g = MtcGrid((10.0, -5.0), 100.0, 3, 4)
    assert g.n_cells == 12
    total = sum(g.cell_polygon(i).area for i in range(g.n_cells))
    assert total == pytest.approx(box(*g.bounds).area)
    assert g.cell_bounds(0) == (10.0, -5.0, 110.0, 95.0)
    assert g.cell_bounds(5) == (110.0, 95.0, 210.0, 195.0)
    assert MtcGrid.from_dict(g.to_dict()) == g


@pytest.mark.parametrize("kw", [dict(cell_size=0), dict(n_rows=0), dict(n_cols=-1)])
def test_grid_rejects_bad_shape(kw):
    args = dict(origin=(0.0, 0.0), cell_size=100.0, n_rows=2, n_cols=2) | kw
    with pytest.raises(TessellationError):
        MtcGrid(**args)


# --- intersection ------------------------------------------------------------

GRID2 = MtcGrid((0.0, 0.0), 100.0, 2, 2)


def test_full_cover_gets_every_cell():
    t = TargetTessellation.from_polygons([("all", box(0, 0, 200, 200))])
    assert intersect_grid(GRID2, t).cells == {"all": [0, 1, 2, 3]}


def test_cell_footprint_maps_to_itself():
    t = TargetTessellation.from_polygons([("c0", box(0, 0, 100, 100))])
    assert intersect_grid(GRID2, t).cells == {"c0": [0]}


def test_diagonal_strip_matches_clipping_oracle():
    tri_a = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0)]
    tri_b = [(100.0, 100.0), (200.0, 100.0), (200.0, 200.0)]
    strip = MultiPolygon([Polygon(tri_a), Polygon(tri_b)])
    t = TargetTessellation.from_polygons([("strip", strip)])
    expected = []
    for cid in range(GRID2.n_cells):
        x0, y0, x1, y1 = GRID2.cell_bounds(cid)
        cell = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        area = sum(shoelace(clip_convex(cell, tri)) for tri in (tri_a, tri_b))
        if area > 1e-6:
            expected.append(cid)
    assert expected == [0, 3]
    assert intersect_grid(GRID2, t).cells["strip"] == expected


def test_region_outside_grid_is_flagged_not_dropped():
    t = TargetTessellation.from_polygons([("in", box(0, 0, 100, 100)), ("out", box(500, 500, 600, 600))])
    imap = intersect_grid(GRID2, t)
    assert imap.cells["out"] == []
    assert imap.empty_regions == ["out"]


def test_offset_region_touching_cells_by_edge_only():
    t = TargetTessellation.from_polygons([("mid", box(100, 0, 200, 100))])
    assert intersect_grid(GRID2, t).cells["mid"] == [1]


def test_intersection_csv_round_trip(tmp_path):
    g = MtcGrid((0.0, 0.0), 50.0, 6, 6)
    t = TargetTessellation.from_polygons(
        (f"v{i}", p) for i, p in enumerate(_voronoi(np.random.default_rng(0).uniform(0, 300, (7, 2)), g.bounds))
    )
    imap = intersect_grid(g, t)
    write_intersection_csv(imap, tmp_path / "i.csv")
    assert (tmp_path / "i.csv").read_text().splitlines()[0] == "region_id,cell_id"
    back = read_intersection_csv(tmp_path / "i.csv", t.region_ids)
    assert back.cells == imap.cells


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_intersection_invariants(n_regions, seed):
    g = MtcGrid((0.0, 0.0), 50.0, 6, 6)
    pts = np.random.default_rng(seed).uniform(0, 300, (n_regions, 2))
    polys = _voronoi(pts, g.bounds)
    t = TargetTessellation.from_polygons((f"v{i}", p) for i, p in enumerate(polys))
    imap = intersect_grid(g, t)
    nonempty = [r for r, cells in imap.cells.items() if cells]
    assert sum(len(c) for c in imap.cells.values()) >= len(nonempty)
    for cells in imap.cells.values():
        assert cells == sorted(set(cells))
    # the regions partition the grid, so every cell is covered at least once
    assert set().union(*map(set, imap.cells.values())) == set(range(g.n_cells))


# --- tessellation validation --------------------------------------------------

def test_degenerate_region_names_the_offender():
    with pytest.raises(TessellationError, match="flat"):
        TargetTessellation.from_polygons([("ok", box(0, 0, 1, 1)), ("flat", Polygon([(0, 0), (1, 0), (2, 0)]))])


def test_declared_area_must_match():
    from mtc_regions.tessellation import Region

    with pytest.raises(TessellationError, match="declared area"):
        TargetTessellation((Region("a", box(0, 0, 10, 10), 101.0),))
    TargetTessellation((Region("a", box(0, 0, 10, 10), 100.05),))


def test_overlap_detection():
    t = TargetTessellation.from_polygons([("a", box(0, 0, 10, 10)), ("b", box(5, 5, 15, 15))])
    with pytest.raises(TessellationError, match="overlap"):
        t.check_non_overlapping()
    square_grid_tessellation(3, 3).check_non_overlapping()


def test_geojson_round_trip(tmp_path):
    t = square_grid_tessellation(2, 3)
    (tmp_path / "r.geojson").write_text(json.dumps(regions_feature_collection(t)))
    back = read_regions_geojson(tmp_path / "r.geojson")
    assert back.region_ids == t.region_ids
    for a, b in zip(back.regions, t.regions):
        assert a.polygon.equals(b.polygon)
        assert a.area == pytest.approx(b.area)


# --- adjacency -------------------------------------------------------------

def test_chain_adjacency():
    t = TargetTessellation.from_polygons(
        [("A", box(0, 0, 1, 1)), ("B", box(1, 0, 2, 1)), ("C", box(2, 0, 3, 1))]
    )
    adj = build_adjacency(t)
    assert adj.neighbors["B"] == {"A", "C"}
    assert adj.neighbors["A"] == {"B"}


def test_corner_contact_is_not_adjacency():
    adj = build_adjacency(square_grid_tessellation(2, 2))
    assert "r1_1" not in adj.neighbors["r0_0"]
    assert "r1_0" not in adj.neighbors["r0_1"]
    assert adj.neighbors["r0_0"] == {"r0_1", "r1_0"}


def test_u_shape_wrapping_square_is_adjacent():
    u = Polygon([(0, 0), (300, 0), (300, 200), (200, 200), (200, 100), (100, 100), (100, 200), (0, 200)])
    sq = box(100, 100, 200, 200)
    shared = boundary_overlap_oracle(u, sq)
    assert shared == pytest.approx(300.0)
    adj = build_adjacency(TargetTessellation.from_polygons([("U", u), ("sq", sq)]))
    assert adj.neighbors["U"] == {"sq"}


def test_adjacency_agrees_with_segment_oracle_on_voronoi():
    pts = np.random.default_rng(3).uniform(0, 1000, (15, 2))
    polys = _voronoi(pts, (0.0, 0.0, 1000.0, 1000.0))
    t = TargetTessellation.from_polygons((f"v{i}", p) for i, p in enumerate(polys))
    adj = build_adjacency(t)
    for i, a in enumerate(polys):
        for j, b in enumerate(polys):
            if i < j:
                touching = boundary_overlap_oracle(a, b) > 1e-6
                assert (f"v{j}" in adj.neighbors[f"v{i}"]) == touching


def test_adjacency_rejects_asymmetry_and_self_loops():
    with pytest.raises(TessellationError):
        RegionAdjacency({"a": frozenset({"b"}), "b": frozenset()})
    with pytest.raises(TessellationError):
        RegionAdjacency({"a": frozenset({"a"})})


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 14), st.integers(0, 10_000))
def test_adjacency_is_order_invariant_and_symmetric(n, seed):
    pts = np.random.default_rng(seed).uniform(0, 500, (n, 2))
    items = [(f"v{i}", p) for i, p in enumerate(_voronoi(pts, (0.0, 0.0, 500.0, 500.0)))]
    adj = build_adjacency(TargetTessellation.from_polygons(items))
    random.Random(seed).shuffle(items)
    adj2 = build_adjacency(TargetTessellation.from_polygons(items))
    assert adj.neighbors == adj2.neighbors
    for a, ns in adj.neighbors.items():
        assert a not in ns
        assert all(a in adj.neighbors[b] for b in ns)


# --- hops and triplets ----------------------------------------------------------

ABCD = chain("A", "B", "C", "D")


def test_hop_neighbors_examples():
    assert hop_neighbors(ABCD, "A", 1) == {"B"}
    assert hop_neighbors(ABCD, "A", 2) == {"B", "C"}
    names = [f"k{i}" for i in range(5)]
    k5 = RegionAdjacency.from_edges(names, [(a, b) for a in names for b in names if a < b])
    assert hop_neighbors(k5, "k2", 3) == set(names) - {"k2"}


def test_hop_neighbors_errors():
    with pytest.raises(KeyError, match="Z"):
        hop_neighbors(ABCD, "Z", 1)
    with pytest.raises(ValueError):
        hop_neighbors(ABCD, "A", 0)


def random_graph(seed: int, n: int, p: float) -> RegionAdjacency:
    r = np.random.default_rng(seed)
    names = [f"n{i}" for i in range(n)]
    edges = [(names[i], names[j]) for i in range(n) for j in range(i + 1, n) if r.random() < p]
    return RegionAdjacency.from_edges(names, edges)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15), st.floats(0.05, 0.6), st.integers(1, 4), st.integers(0, 3))
def test_hop_neighbors_monotone_in_hops(seed, n, p, h1, dh):
    adj = random_graph(seed, n, p)
    anchor = adj.region_ids[seed % n]
    assert hop_neighbors(adj, anchor, h1) <= hop_neighbors(adj, anchor, h1 + dh)


def test_triplet_chain_examples():
    for s in range(20):
        t = sample_triplet(ABCD, "A", 1, s)
        assert t.positive == "B" and t.negative in {"C", "D"}
        t = sample_triplet(ABCD, "B", 1, s)
        assert t.positive in {"A", "C"} and t.negative == "D"


def test_triplet_draws_are_uniform():
    seen = {"C": 0, "D": 0}
    r = np.random.default_rng(0)
    for _ in range(2000):
        seen[sample_triplet(ABCD, "A", 1, r).negative] += 1
    assert abs(seen["C"] - seen["D"]) < 200


def test_triplet_grid_center_matches_bfs_oracle():
    adj = build_adjacency(square_grid_tessellation(10, 10))
    t1 = sample_triplet(adj, "r5_5", 2, 99)
    t2 = sample_triplet(adj, "r5_5", 2, 99)
    assert t1 == t2

    def manhattan(rid):
        i, j = map(int, rid[1:].split("_"))
        return abs(i - 5) + abs(j - 5)

    # rook adjacency on a full grid: graph distance is the Manhattan distance
    assert graph_distances(adj, "r5_5") == {r: manhattan(r) for r in adj.region_ids}
    for s in range(50):
        t = sample_triplet(adj, "r5_5", 2, s)
        assert 1 <= manhattan(t.positive) <= 2
        assert manhattan(t.negative) > 2


def test_isolated_anchor_skipped_and_saturated_anchor_raises():
    adj = RegionAdjacency.from_edges(["A", "B", "C"], [("A", "B")])
    assert sample_triplet(adj, "C", 1, 0) is None
    tri = RegionAdjacency.from_edges(["A", "B", "C"], [("A", "B"), ("B", "C"), ("A", "C")])
    with pytest.raises(NoNegativeError):
        sample_triplet(tri, "A", 1, 0)


def test_eligible_anchors_three_chain():
    assert eligible_anchors(chain("A", "B", "C"), 1) == ["A", "C"]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 15), st.floats(0.05, 0.5), st.integers(1, 3))
def test_triplet_roles_respect_hops(seed, n, p, hops):
    adj = random_graph(seed, n, p)
    r = np.random.default_rng(seed)
    for anchor in eligible_anchors(adj, hops):
        t = sample_triplet(adj, anchor, hops, r)
        reach = hop_neighbors(adj, anchor, hops)
        assert t.positive in reach
        assert t.negative not in reach and t.negative != anchor
