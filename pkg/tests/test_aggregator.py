from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtc_regions.aggregator import (
    AggregatorConfig,
    AggregatorError,
    AggregatorModel,
    RegionFeatureMatrix,
    aggregate,
    build_feature_matrix,
    embed_regions,
    load_checkpoint,
    save_checkpoint,
    train_aggregator,
    triplet_distances,
    triplet_loss,
    triplet_loss_torch,
    write_region_embeddings,
)
from mtc_regions.autoencoder import TrainingDiverged, read_embeddings_csv
from mtc_regions.tessellation import RegionAdjacency, build_adjacency

from conftest import chain, finite_difference_check, jitter, square_grid_tessellation

KINDS = ("weighted_sum", "transformer")
MINI = dict(in_dim=4, out_dim=8, ff_dim=16, cap=8)


def random_fm(r, region_id="r", cap=8, dim=4, count=None):
    count = count or int(r.integers(1, cap + 1))
    X = np.zeros((cap, dim))
    X[:count] = r.normal(size=(count, dim))
    mask = np.zeros(cap, dtype=bool)
    mask[:count] = True
    return RegionFeatureMatrix(region_id, X, mask)


def forward(model, X, mask):
    with torch.no_grad():
        return model(torch.from_numpy(X)[None].double(), torch.from_numpy(mask)[None])[0].numpy()


# --- feature matrices ---------------------------------------------------------

def test_two_cell_region_is_padded():
    emb = {5: np.ones(44), 9: np.full(44, 2.0)}
    fm = build_feature_matrix("A", [9, 5], emb)
    assert fm.X.shape == (300, 44)
    assert fm.mask.tolist() == [True, True] + [False] * 298
    assert np.array_equal(fm.X[0], emb[5]) and np.array_equal(fm.X[1], emb[9])
    assert not fm.X[2:].any()
    assert fm.count == 2


def test_oversized_region_is_sampled_to_cap():
    emb = {c: np.full(3, float(c)) for c in range(350)}
    fm = build_feature_matrix("big", list(range(350)), emb, seed=4)
    assert fm.X.shape == (300, 3) and fm.mask.all()
    rows = fm.X[:, 0]
    assert len(set(rows)) == 300 and np.all(np.diff(rows) > 0)
    again = build_feature_matrix("big", list(range(349, -1, -1)), emb, seed=4)
    assert np.array_equal(again.X, fm.X)
    other = build_feature_matrix("big", list(range(350)), emb, seed=5)
    assert not np.array_equal(other.X, fm.X)


def test_only_regions_above_cap_are_subsampled():
    r = np.random.default_rng(0)
    n_regions, n_big = 2841, 29
    big = set(r.choice(n_regions, n_big, replace=False).tolist())
    counts = [int(r.integers(301, 600)) if i in big else int(r.integers(1, 301)) for i in range(n_regions)]
    # region i owns a contiguous block of cell ids; embedding = cell id
    starts = np.concatenate([[0], np.cumsum(counts)])
    emb = {c: np.array([float(c)]) for c in range(int(starts[-1]))}
    subsampled = set()
    for i in range(n_regions):
        cells = list(range(starts[i], starts[i + 1]))
        fm = build_feature_matrix(f"R{i}", cells, emb, seed=1)
        assert fm.count == min(counts[i], 300)
        if set(fm.X[fm.mask, 0].astype(int)) != set(cells):
            subsampled.add(i)
    assert subsampled == big
    assert len(subsampled) == 29


def test_feature_matrix_errors():
    with pytest.raises(AggregatorError, match="no cells"):
        build_feature_matrix("A", [], {})
    with pytest.raises(AggregatorError, match="no embedding"):
        build_feature_matrix("A", [1, 2], {1: np.zeros(2)})
    with pytest.raises(AggregatorError, match="no real rows"):
        RegionFeatureMatrix("A", np.zeros((3, 2)), np.zeros(3, dtype=bool))


# --- forward semantics ----------------------------------------------------------

def test_closed_gate_outputs_bias():
    model = AggregatorModel(AggregatorConfig(kind="weighted_sum"))
    net = model.net
    with torch.no_grad():
        net.gate.weight.zero_()
        net.gate.bias.fill_(-1e3)
        net.out.weight.zero_()
        net.out.weight[:44, :44] = torch.eye(44, dtype=torch.float64)
    fm = random_fm(np.random.default_rng(0), cap=300, dim=44, count=17)
    v = aggregate(model, fm).vector
    np.testing.assert_allclose(v, net.out.bias.detach().numpy(), atol=1e-12)


def test_single_row_transformer_is_encoder_of_projection():
    model = AggregatorModel(AggregatorConfig(kind="transformer", seed=2)).eval()
    fm = random_fm(np.random.default_rng(1), cap=300, dim=44, count=1)
    v = aggregate(model, fm).vector
    net = model.net
    with torch.no_grad():
        tok = net.proj(torch.from_numpy(fm.X[:1])[None])
        direct = net.encoder(tok)[0, 0].numpy()
    np.testing.assert_allclose(v, direct, atol=1e-10)


def test_duplicate_rows_sum_versus_mean():
    r = np.random.default_rng(7)
    row = r.normal(size=44)
    X = np.zeros((300, 44))
    X[:3] = row
    two, three = np.zeros(300, dtype=bool), np.zeros(300, dtype=bool)
    two[:2], three[:3] = True, True
    X2 = X.copy()
    X2[2] = 0
    ws = AggregatorModel(AggregatorConfig(kind="weighted_sum")).eval()
    tf = AggregatorModel(AggregatorConfig(kind="transformer")).eval()
    ws2, ws3 = forward(ws, X2, two), forward(ws, X, three)
    assert np.max(np.abs(ws2 - ws3)) > 1e-3
    # sum semantics: the pre-projection vector scales with the number of copies
    b = ws.net.out.bias.detach().numpy()
    np.testing.assert_allclose((ws3 - b), 1.5 * (ws2 - b), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(forward(tf, X2, two), forward(tf, X, three), atol=1e-10)


@pytest.mark.parametrize("kind", KINDS)
def test_permutation_and_padding_invariance(kind):
    model = AggregatorModel(AggregatorConfig(kind=kind, seed=3)).eval()
    r = np.random.default_rng(11)
    worst_perm = worst_pad = 0.0
    for _ in range(100):
        count = int(r.integers(1, 41))
        cap = int(r.integers(count, count + 20))
        X = np.zeros((cap, 44))
        X[:count] = r.normal(size=(count, 44)) * r.uniform(0.1, 3)
        mask = np.zeros(cap, dtype=bool)
        mask[:count] = True
        base = forward(model, X, mask)
        perm = r.permutation(cap)  # shuffles real and padded rows together
        worst_perm = max(worst_perm, np.max(np.abs(forward(model, X[perm], mask[perm]) - base)))
        noisy = X.copy()
        noisy[~mask] = r.normal(size=(cap - count, 44)) * 100
        worst_pad = max(worst_pad, np.max(np.abs(forward(model, noisy, mask) - base)))
    assert worst_perm < 1e-6
    assert worst_pad < 1e-6


def test_all_false_mask_rejected():
    model = AggregatorModel(AggregatorConfig(kind="transformer"))
    with pytest.raises(AggregatorError, match="all-false"):
        model(torch.zeros(1, 4, 44, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.bool))


def test_kind_selects_parameters():
    ws = AggregatorModel(AggregatorConfig(kind="weighted_sum"))
    tf = AggregatorModel(AggregatorConfig(kind="transformer"))
    assert {n.split(".")[1] for n, _ in ws.named_parameters()} == {"gate", "out"}
    assert {n.split(".")[1] for n, _ in tf.named_parameters()} == {"proj", "encoder"}
    layers = tf.net.encoder.layers
    assert len(layers) == 2 and all(l.self_attn.num_heads == 1 for l in layers)
    assert layers[0].linear1.out_features == 128
    with pytest.raises(AggregatorError):
        AggregatorConfig(kind="mean")


# --- triplet loss ----------------------------------------------------------------------

def test_triplet_loss_examples():
    a = np.zeros(3)
    assert triplet_loss(a, a, np.array([2.0, 0, 0]), 1.0) == 0.0
    assert triplet_loss(a, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), 1.0) == 1.0
    assert triplet_loss(a, np.array([0.5, 0, 0]), np.array([0, 2.0, 0]), 1.0) == 0.0
    with pytest.raises(AggregatorError):
        triplet_loss(a, np.zeros(2), a, 1.0)
    with pytest.raises(AggregatorError):
        triplet_loss(a, a, a, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3), st.floats(1, 50))
def test_triplet_loss_properties(seed, m, c):
    r = np.random.default_rng(seed)
    a, p, n = r.normal(size=(3, 5))
    d_ap, d_an = np.linalg.norm(a - p), np.linalg.norm(a - n)
    loss = triplet_loss(a, p, n, m)
    assert loss >= 0
    assert (loss == 0) == (d_an >= d_ap + m)
    scaled = triplet_loss(c * a, c * p, c * n, m)
    assert scaled == pytest.approx(max(c * (d_ap - d_an) + m, 0.0), abs=1e-9)
    t = triplet_loss_torch(*(torch.from_numpy(v)[None] for v in (a, p, n)), m)
    assert float(t[0]) == pytest.approx(loss, abs=1e-12)


# --- gradients -------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_aggregator_gradients_match_finite_differences(kind):
    model = AggregatorModel(AggregatorConfig(kind=kind, **MINI))
    r = np.random.default_rng(0)
    fms = [random_fm(r, f"r{i}", cap=8, dim=4) for i in range(6)]
    X = torch.from_numpy(np.stack([f.X for f in fms]))
    mask = torch.from_numpy(np.stack([f.mask for f in fms]))
    anchor, pos, neg = [0, 1, 2], [3, 4, 5], [5, 3, 4]

    def loss():
        e = model(X, mask)
        return triplet_loss_torch(e[anchor], e[pos], e[neg], 10.0).mean()

    params = list(model.parameters())
    jitter(params, 1)
    worst, checked = finite_difference_check(loss, params, 120, seed=2)
    assert checked >= 100
    assert worst < 1e-4


# --- training -------------------------------------------------------------------------------

def grid_problem(seed=0, dim=4, side=4):
    """Regions on a grid whose features encode their column: nearby regions look alike."""
    tess = square_grid_tessellation(side, side)
    adj = build_adjacency(tess)
    r = np.random.default_rng(seed)
    fms = []
    for rid in tess.region_ids:
        i, j = map(int, rid[1:].split("_"))
        count = int(r.integers(1, 9))
        X = np.zeros((8, dim))
        X[:count] = np.array([i, j] + [0] * (dim - 2)) + 0.1 * r.normal(size=(count, dim))
        mask = np.arange(8) < count
        fms.append(RegionFeatureMatrix(rid, X, mask))
    return fms, adj


@pytest.mark.parametrize("kind", KINDS)
def test_training_is_deterministic(kind):
    fms, adj = grid_problem()
    cfg = AggregatorConfig(kind=kind, epochs=3, lr=1e-3, **MINI)
    a, b = train_aggregator(cfg, fms, adj), train_aggregator(cfg, fms, adj)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    assert a.log == b.log
    assert [e["epoch"] for e in a.log] == [0, 1, 2]
    assert all(0 <= e["active"] <= 1 for e in a.log)


@pytest.mark.parametrize("kind", KINDS)
def test_training_separates_neighbours(kind):
    fms, adj = grid_problem(side=5)
    cfg = AggregatorConfig(kind=kind, epochs=40, lr=3e-3, hops=1, **MINI)

    def heldout(model):
        emb = {e.region_id: e.vector for e in embed_regions(model, fms)}
        return triplet_distances(emb, adj, 1, 200, seed=9)

    before = heldout(AggregatorModel(cfg).eval())
    d_ap, d_an = heldout(train_aggregator(cfg, fms, adj))
    assert d_ap.mean() < d_an.mean()
    assert np.maximum(d_ap - d_an + 1, 0).mean() < np.maximum(before[0] - before[1] + 1, 0).mean()


def test_zero_margin_loss_is_floored_at_zero():
    fms, adj = grid_problem()
    model = train_aggregator(AggregatorConfig(kind="weighted_sum", margin=0.0, epochs=5, lr=1e-2, **MINI), fms, adj)
    assert all(e["loss"] >= 0 for e in model.log)


def test_three_region_chain_trains_on_end_anchors(caplog):
    r = np.random.default_rng(0)
    fms = [random_fm(r, rid) for rid in "ABC"]
    caplog.set_level("INFO")
    model = train_aggregator(AggregatorConfig(kind="weighted_sum", hops=1, epochs=1, **MINI), fms, chain("A", "B", "C"))
    assert "1 regions lack a valid triplet" in caplog.text
    assert len(model.log) == 1


def test_training_errors():
    r = np.random.default_rng(0)
    fms = [random_fm(r, rid) for rid in "ABC"]
    full = RegionAdjacency.from_edges("ABC", [("A", "B"), ("B", "C"), ("A", "C")])
    cfg = AggregatorConfig(kind="weighted_sum", hops=1, epochs=1, **MINI)
    with pytest.raises(AggregatorError, match="no region"):
        train_aggregator(cfg, fms, full)
    with pytest.raises(AggregatorError, match="at least 3"):
        train_aggregator(cfg, fms[:2], chain("A", "B"))
    bad = [replace(f, X=np.where(f.mask[:, None], np.nan, f.X)) for f in fms]
    with pytest.raises(TrainingDiverged):
        train_aggregator(cfg, bad, chain("A", "B", "C"))


def test_l2_toggle_changes_training():
    fms, adj = grid_problem()
    cfg = AggregatorConfig(kind="weighted_sum", epochs=3, lr=1e-2, **MINI)
    a = train_aggregator(cfg, fms, adj)
    b = train_aggregator(replace(cfg, l2_normalize=True), fms, adj)
    assert not torch.equal(a.net.out.weight, b.net.out.weight)
    # unit vectors are at most 2 apart, so the loss is bounded by 2 + margin
    assert all(e["loss"] <= 3.0 for e in b.log)


# --- embedding and persistence --------------------------------------------------------------

def test_embed_regions_order_and_determinism():
    fms, _ = grid_problem()
    model = AggregatorModel(AggregatorConfig(kind="transformer", **MINI)).eval()
    out = embed_regions(model, fms, {"slot": "full"})
    assert [e.region_id for e in out] == [f.region_id for f in fms]
    again = embed_regions(model, fms)
    assert all(np.array_equal(a.vector, b.vector) for a, b in zip(out, again))
    assert out[0].provenance == {"slot": "full"}
    assert all(e.vector.shape == (8,) and np.all(np.isfinite(e.vector)) for e in out)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(tmp_path, kind):
    fms, adj = grid_problem()
    model = train_aggregator(AggregatorConfig(kind=kind, epochs=2, **MINI), fms, adj)
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == model.config and back.log == model.log
    for a, b in zip(embed_regions(model, fms), embed_regions(back, fms)):
        assert np.array_equal(a.vector, b.vector)
    write_region_embeddings(embed_regions(back, fms), tmp_path / "e.csv")
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "region_id," + ",".join(f"e_{i}" for i in range(8))
    assert set(read_embeddings_csv(tmp_path / "e.csv")) == {f.region_id for f in fms}
