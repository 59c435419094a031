"""Set aggregators that turn a region's cell embeddings into one region embedding,
trained with a triplet margin loss over the region neighbourhood graph."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import seeding
from .autoencoder import TrainingDiverged
from .io_utils import array_bytes, load_array, pack_archive, unpack_archive, write_bytes_atomic
from .tessellation import RegionAdjacency, Triplet, eligible_anchors, sample_triplet

logger = logging.getLogger(__name__)

KINDS = ("weighted_sum", "transformer")


class AggregatorError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "transformer"
    in_dim: int = 44
    out_dim: int = 64
    ff_dim: int = 128
    n_layers: int = 2
    cap: int = 300
    margin: float = 1.0
    hops: int = 2
    lr: float = 1e-4
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    l2_normalize: bool = False  # unit-normalize embeddings inside the triplet loss

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AggregatorError(f"unknown aggregator kind {self.kind!r}; expected one of {KINDS}")
        if min(self.in_dim, self.out_dim, self.ff_dim, self.n_layers, self.cap, self.hops, self.batch_size) < 1:
            raise AggregatorError("dimensions, cap, hops and batch size must be positive")
        if self.margin < 0 or self.lr < 0 or self.epochs < 0:
            raise AggregatorError("margin, lr and epochs must be non-negative")


@dataclass(frozen=True)
class RegionFeatureMatrix:
    region_id: str
    X: np.ndarray  # (cap, dim); rows with mask False are zero
    mask: np.ndarray  # (cap,) bool

    def __post_init__(self):
        if self.X.shape[0] != self.mask.shape[0]:
            raise AggregatorError(f"region {self.region_id}: mask length does not match rows")
        if not self.mask.any():
            raise AggregatorError(f"region {self.region_id}: feature matrix has no real rows")

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class RegionEmbedding:
    region_id: str
    vector: np.ndarray = field(compare=False)
    provenance: dict = field(default_factory=dict, compare=False)


def build_feature_matrix(
    region_id: str,
    cell_ids: Sequence[int],
    embeddings: Mapping[int, np.ndarray],
    cap: int = 300,
    seed: int = 0,
) -> RegionFeatureMatrix:
    """Stack a region's cell embeddings into a zero-padded ``cap``-row matrix.

    Regions with more than ``cap`` cells keep a seeded uniform sample of
    ``cap`` of them (in ascending cell order).
    """
    if cap < 1:
        raise AggregatorError(f"cap must be >= 1, got {cap}")
    if not cell_ids:
        raise AggregatorError(f"region {region_id} has no cells")
    missing = [c for c in cell_ids if c not in embeddings]
    if missing:
        raise AggregatorError(f"region {region_id}: no embedding for cells {missing[:5]}")
    ids = sorted(cell_ids)
    if len(ids) > cap:
        pick = seeding.rng(seed, "feature-sample", region_id).choice(len(ids), size=cap, replace=False)
        ids = [ids[i] for i in sorted(pick)]
    dim = len(next(iter(embeddings.values())))
    X = np.zeros((cap, dim))
    X[: len(ids)] = np.stack([embeddings[c] for c in ids])
    mask = np.zeros(cap, dtype=bool)
    mask[: len(ids)] = True
    return RegionFeatureMatrix(region_id, X, mask)


class WeightedSumAggregator(nn.Module):
    """Sigmoid-gated rows, summed over the real rows, then projected."""

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.gate = nn.Linear(cfg.in_dim, cfg.in_dim)
        self.out = nn.Linear(cfg.in_dim, cfg.out_dim)

    def forward(self, X: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        gated = X * torch.sigmoid(self.gate(X)) * mask.unsqueeze(-1)
        return self.out(gated.sum(dim=1))


class TransformerAggregator(nn.Module):
    """Projection, single-head self-attention encoder layers, masked mean pooling."""

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.in_dim, cfg.out_dim)
        layer = nn.TransformerEncoderLayer(
            cfg.out_dim, nhead=1, dim_feedforward=cfg.ff_dim, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)

    def forward(self, X: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.encoder(self.proj(X), src_key_padding_mask=~mask)
        m = mask.unsqueeze(-1).to(h.dtype)
        return (h * m).sum(dim=1) / m.sum(dim=1)


class AggregatorModel(nn.Module):
    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.config = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seeding.derive_seed(cfg.seed, "agg-init", cfg.kind))
            net = WeightedSumAggregator(cfg) if cfg.kind == "weighted_sum" else TransformerAggregator(cfg)
        self.net = net.double()
        self.log: list[dict] = []

    def forward(self, X: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=1).all()):
            raise AggregatorError("feature matrix with an all-false mask")
        return self.net(X, mask)


def _batch(fms: Sequence[RegionFeatureMatrix]) -> tuple[torch.Tensor, torch.Tensor]:
    X = torch.from_numpy(np.stack([fm.X for fm in fms])).double()
    mask = torch.from_numpy(np.stack([fm.mask for fm in fms]))
    return X, mask


def aggregate(model: AggregatorModel, fm: RegionFeatureMatrix, provenance: Mapping | None = None) -> RegionEmbedding:
    X, mask = _batch([fm])
    with torch.no_grad():
        v = model(X, mask)[0]
    if not torch.isfinite(v).all():
        raise AggregatorError(f"region {fm.region_id}: non-finite embedding")
    return RegionEmbedding(fm.region_id, v.numpy().copy(), dict(provenance or {}))


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float) -> float:
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not a.shape == p.shape == n.shape:
        raise AggregatorError(f"embedding dimensions differ: {a.shape}, {p.shape}, {n.shape}")
    if margin < 0:
        raise AggregatorError("margin must be non-negative")
    return max(float(np.linalg.norm(a - p) - np.linalg.norm(a - n)) + margin, 0.0)


def triplet_loss_torch(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float) -> torch.Tensor:
    """Per-triplet losses for row-aligned (B, d) batches."""
    d_ap = torch.linalg.vector_norm(a - p, dim=-1)
    d_an = torch.linalg.vector_norm(a - n, dim=-1)
    return torch.clamp(d_ap - d_an + margin, min=0.0)


def _restrict(adj: RegionAdjacency, keep: set[str]) -> RegionAdjacency:
    return RegionAdjacency({r: frozenset(n & keep) for r, n in adj.neighbors.items() if r in keep})


def train_aggregator(
    cfg: AggregatorConfig, feature_matrices: Sequence[RegionFeatureMatrix], adjacency: RegionAdjacency
) -> AggregatorModel:
    """Triplet training: each epoch visits every eligible anchor once in seeded
    order, drawing a fresh (positive, negative) pair per visit."""
    fm_by_id = {fm.region_id: fm for fm in feature_matrices}
    if len(fm_by_id) < 3:
        raise AggregatorError(f"need at least 3 regions, got {len(fm_by_id)}")
    adj = _restrict(adjacency, set(fm_by_id))
    anchors = eligible_anchors(adj, cfg.hops)
    if not anchors:
        raise AggregatorError(f"no region has both a positive and a negative at hops={cfg.hops}")
    skipped = len(adj.neighbors) - len(anchors)
    if skipped:
        logger.info("%d regions lack a valid triplet at hops=%d and are skipped as anchors", skipped, cfg.hops)

    model = AggregatorModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    for epoch in range(cfg.epochs):
        order_rng = seeding.rng(cfg.seed, "triplet-order", epoch)
        draw_rng = seeding.rng(cfg.seed, "triplet-sampling", epoch)
        order = [anchors[i] for i in order_rng.permutation(len(anchors))]
        triplets = [sample_triplet(adj, a, cfg.hops, draw_rng) for a in order]
        total, active = 0.0, 0
        for i in range(0, len(triplets), cfg.batch_size):
            chunk = triplets[i : i + cfg.batch_size]
            losses = _triplet_batch_losses(model, chunk, fm_by_id, cfg.margin, cfg.l2_normalize)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(losses.detach().sum())
            active += int((losses.detach() > 0).sum())
        model.log.append({"epoch": epoch, "loss": total / len(triplets), "active": active / len(triplets)})
    model.eval()
    return model


def _triplet_batch_losses(
    model: AggregatorModel,
    chunk: Sequence[Triplet],
    fm_by_id: Mapping[str, RegionFeatureMatrix],
    margin: float,
    l2_normalize: bool = False,
) -> torch.Tensor:
    ids = sorted({r for t in chunk for r in (t.anchor, t.positive, t.negative)})
    pos = {r: i for i, r in enumerate(ids)}
    emb = model(*_batch([fm_by_id[r] for r in ids]))
    if l2_normalize:
        emb = torch.nn.functional.normalize(emb, dim=-1)
    idx = lambda role: torch.tensor([pos[getattr(t, role)] for t in chunk])  # noqa: E731
    return triplet_loss_torch(emb[idx("anchor")], emb[idx("positive")], emb[idx("negative")], margin)


def embed_regions(
    model: AggregatorModel, feature_matrices: Sequence[RegionFeatureMatrix], provenance: Mapping | None = None
) -> list[RegionEmbedding]:
    out = []
    for fm in feature_matrices:
        try:
            out.append(aggregate(model, fm, provenance))
        except AggregatorError as e:
            raise AggregatorError(f"region {fm.region_id}: {e}") from e
    return out


def triplet_distances(
    embeddings: Mapping[str, np.ndarray], adjacency: RegionAdjacency, hops: int, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor-positive and anchor-negative distances over ``n`` freshly sampled triplets."""
    adj = _restrict(adjacency, set(embeddings))
    anchors = eligible_anchors(adj, hops)
    if not anchors:
        raise AggregatorError("no eligible anchors")
    r = seeding.rng(seed, "heldout-triplets")
    d_ap, d_an = [], []
    for _ in range(n):
        t = sample_triplet(adj, anchors[int(r.integers(len(anchors)))], hops, r)
        a = embeddings[t.anchor]
        d_ap.append(np.linalg.norm(a - embeddings[t.positive]))
        d_an.append(np.linalg.norm(a - embeddings[t.negative]))
    return np.array(d_ap), np.array(d_an)


# --- persistence -------------------------------------------------------------

def save_checkpoint(model: AggregatorModel, path: str | Path) -> None:
    members = {f"params/{k}.npy": array_bytes(v.detach().numpy()) for k, v in model.state_dict().items()}
    members["config.json"] = json.dumps(asdict(model.config), sort_keys=True).encode()
    members["log.json"] = json.dumps(model.log).encode()
    write_bytes_atomic(path, pack_archive(members))


def load_checkpoint(path: str | Path) -> AggregatorModel:
    members = unpack_archive(path)
    model = AggregatorModel(AggregatorConfig(**json.loads(members["config.json"])))
    state = {
        name[len("params/") : -len(".npy")]: torch.from_numpy(load_array(data))
        for name, data in members.items()
        if name.startswith("params/")
    }
    model.load_state_dict(state)
    model.log = json.loads(members["log.json"])
    model.eval()
    return model


def write_region_embeddings(embeddings: Sequence[RegionEmbedding], path: str | Path) -> None:
    dim = len(embeddings[0].vector)
    lines = [",".join(["region_id"] + [f"e_{i}" for i in range(dim)])]
    for e in embeddings:
        lines.append(",".join([e.region_id] + [repr(float(v)) for v in e.vector]))
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode())
