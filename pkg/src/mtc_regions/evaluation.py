"""Downstream evaluation of region embeddings.

Supervised harnesses (land-use distribution, population density), Ward
clustering, and clustering agreement measures in which each region
counts in proportion to its area. All logarithms are natural.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.cluster.hierarchy import linkage
from scipy.special import gammaln
from sklearn.ensemble import RandomForestRegressor
from sklearn.metrics import silhouette_score
from torch import nn

from . import seeding

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-8


class EvaluationError(ValueError):
    pass


# --- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    repeats: list[dict]
    config: dict
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = summarize(self.repeats)

    def to_dict(self) -> dict:
        return {"task": self.task, "config": self.config, "summary": self.summary, "repeats": self.repeats}

    def to_text(self) -> str:
        rows = [("metric", "mean", "std", "n")]
        for name, s in self.summary.items():
            mean = "undefined" if s["mean"] is None else f"{s['mean']:.5f}"
            std = "undefined" if s["std"] is None else f"{s['std']:.5f}"
            rows.append((name, mean, std, str(s["n"])))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"task: {self.task}"]
        lines += [f"  {k} = {v}" for k, v in sorted(self.config.items())]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"


def summarize(repeats: Sequence[Mapping[str, float | None]]) -> dict:
    out = {}
    for name in repeats[0]:
        vals = [r[name] for r in repeats if r[name] is not None]
        if len(vals) >= 2:
            out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)), "n": len(vals)}
        elif len(vals) == 1:
            out[name] = {"mean": float(vals[0]), "std": None, "n": 1}
        else:
            out[name] = {"mean": None, "std": None, "n": 0}
    return out


def _split(n: int, fractions: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    total = sum(fractions)
    sizes = [int(round(n * f / total)) for f in fractions[:-1]]
    sizes = [max(s, 1) for s in sizes]
    if sum(sizes) >= n:
        raise EvaluationError(f"{n} regions are too few for split {tuple(fractions)}")
    cuts = np.cumsum(sizes)
    return np.split(perm, cuts)


def _matrix(embeddings: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    return np.stack([np.asarray(embeddings[r], dtype=np.float64) for r in ids])


# --- land use ----------------------------------------------------------------

def _smooth(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, KL_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def landuse_metrics(true: np.ndarray, pred: np.ndarray) -> dict:
    """Mean KL(true || pred), L1 distance and cosine similarity over rows."""
    t, p = _smooth(true), _smooth(pred)
    kl = np.sum(t * (np.log(t) - np.log(p)), axis=1)
    l1 = np.abs(true - pred).sum(axis=1)
    cos = (true * pred).sum(axis=1) / (np.linalg.norm(true, axis=1) * np.linalg.norm(pred, axis=1))
    return {"kl": float(kl.mean()), "l1": float(l1.mean()), "cosine": float(cos.mean())}


class LanduseMLP(nn.Module):
    def __init__(self, d_in: int, k: int, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, k))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.net(x), dim=-1)


def _kl_loss(log_pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (target * (target.log() - log_pred)).sum(dim=-1).mean()


def fit_landuse_mlp(
    X_train: np.ndarray,
    Y_train: np.ndarray,
    X_val: np.ndarray,
    Y_val: np.ndarray,
    seed: int,
    hidden: int = 512,
    epochs: int = 100,
    patience: int = 10,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> LanduseMLP:
    """Train on KL divergence, keeping the weights with the best validation KL."""
    with torch.random.fork_rng():
        torch.manual_seed(seeding.derive_seed(seed, "mlp-init"))
        model = LanduseMLP(X_train.shape[1], Y_train.shape[1], hidden).double()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    xt, yt = torch.from_numpy(X_train), torch.from_numpy(_smooth(Y_train))
    xv, yv = torch.from_numpy(X_val), torch.from_numpy(_smooth(Y_val))
    g = seeding.torch_generator(seed, "mlp-shuffle")
    best, best_state, stale = math.inf, None, 0
    for _ in range(epochs):
        model.train()
        order = torch.randperm(len(xt), generator=g)
        for i in range(0, len(xt), batch_size):
            b = order[i : i + batch_size]
            loss = _kl_loss(model(xt[b]), yt[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = float(_kl_loss(model(xv), yv))
        if val < best:
            best, stale = val, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def _standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(a - mu) / sd for a in (train, *others)]


def landuse_eval(
    embeddings: Mapping[str, np.ndarray],
    labels: Mapping[str, np.ndarray],
    repeats: int = 30,
    split: Sequence[int] = (70, 10, 20),
    seed: int = 0,
    epochs: int = 100,
    patience: int = 10,
    hidden: int = 512,
    lr: float = 1e-3,
) -> EvalReport:
    ids = sorted(embeddings)
    missing = [r for r in ids if r not in labels]
    if missing:
        raise EvaluationError(f"regions without land-use labels: {missing[:5]}")
    X = _matrix(embeddings, ids)
    Y = np.stack([np.asarray(labels[r], dtype=np.float64) for r in ids])
    if Y.shape[1] < 2:
        raise EvaluationError("land-use labels need at least two categories")
    if np.any(np.abs(Y.sum(axis=1) - 1) > 1e-9) or np.any(Y < 0):
        raise EvaluationError("land-use labels must be distributions")
    runs = []
    for rep in range(repeats):
        tr, va, te = _split(len(ids), split, seeding.rng(seed, "landuse-split", rep))
        Xtr, Xva, Xte = _standardize(X[tr], X[va], X[te])
        model = fit_landuse_mlp(
            Xtr, Y[tr], Xva, Y[va], seeding.derive_seed(seed, "landuse-mlp", rep), hidden, epochs, patience, lr
        )
        with torch.no_grad():
            pred = model(torch.from_numpy(Xte)).exp().numpy()
        if pred.shape[1] != Y.shape[1]:
            raise EvaluationError(f"model predicts {pred.shape[1]} categories, labels have {Y.shape[1]}")
        m = landuse_metrics(Y[te], pred)
        base = landuse_metrics(Y[te], np.full_like(Y[te], 1.0 / Y.shape[1]))
        runs.append({**m, **{f"uniform_{k}": v for k, v in base.items()}})
    config = {
        "repeats": repeats, "split": list(split), "seed": seed, "epochs": epochs,
        "patience": patience, "hidden": hidden, "lr": lr, "n_regions": len(ids), "k": int(Y.shape[1]),
    }
    return EvalReport("landuse", runs, config)


# --- population density ------------------------------------------------------

def regression_metrics(y: np.ndarray, pred: np.ndarray) -> dict:
    err = pred - y
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(np.sum(err**2)) / ss_tot
    return {"mae": float(np.abs(err).mean()), "rmse": float(np.sqrt(np.mean(err**2))), "r2": r2}


def density_eval(
    embeddings: Mapping[str, np.ndarray],
    labels: Mapping[str, float],
    repeats: int = 30,
    split: Sequence[int] = (80, 20),
    seed: int = 0,
    n_trees: int = 100,
) -> EvalReport:
    """Random-forest regression of density from embeddings; R^2 is None on constant test targets."""
    ids = sorted(embeddings)
    missing = [r for r in ids if r not in labels]
    if missing:
        raise EvaluationError(f"regions without density labels: {missing[:5]}")
    X = _matrix(embeddings, ids)
    y = np.array([float(labels[r]) for r in ids])
    if np.any(y < 0):
        raise EvaluationError("densities must be non-negative")
    runs = []
    for rep in range(repeats):
        tr, te = _split(len(ids), split, seeding.rng(seed, "density-split", rep))
        rf = RandomForestRegressor(
            n_estimators=n_trees, random_state=seeding.derive_seed(seed, "density-rf", rep) % (2**32), n_jobs=1
        )
        rf.fit(X[tr], y[tr])
        m = regression_metrics(y[te], rf.predict(X[te]))
        base = regression_metrics(y[te], np.full(len(te), y[tr].mean()))
        runs.append({**m, **{f"train_mean_{k}": v for k, v in base.items()}})
    config = {"repeats": repeats, "split": list(split), "seed": seed, "n_trees": n_trees, "n_regions": len(ids)}
    return EvalReport("density", runs, config)


# --- clustering --------------------------------------------------------------

@dataclass(frozen=True)
class WeightedClustering:
    labels: dict[str, int]
    weights: dict[str, float]
    k: int

    def __post_init__(self):
        if set(self.labels) != set(self.weights):
            raise EvaluationError("labels and weights cover different regions")
        if any(w <= 0 for w in self.weights.values()):
            raise EvaluationError("area weights must be positive")
        if any(not 0 <= l < self.k for l in self.labels.values()):
            raise EvaluationError(f"labels must lie in [0, {self.k})")

    @classmethod
    def from_labels(cls, labels: Mapping[str, object], weights: Mapping[str, float] | None = None) -> "WeightedClustering":
        """Relabel arbitrary hashable labels to 0..k-1 in order of first appearance (sorted region ids)."""
        ids = sorted(labels)
        codes: dict[object, int] = {}
        out = {}
        for r in ids:
            out[r] = codes.setdefault(labels[r], len(codes))
        w = {r: 1.0 for r in ids} if weights is None else {r: float(weights[r]) for r in ids}
        return cls(out, w, len(codes))

    def region_ids(self) -> list[str]:
        return sorted(self.labels)


def ward_cluster(
    embeddings: Mapping[str, np.ndarray], k: int, areas: Mapping[str, float] | None = None
) -> WeightedClustering:
    """Ward agglomeration cut at exactly ``k`` clusters.

    The first ``n - k`` merges of the hierarchy are replayed, so ties in
    merge height never change the cluster count.
    """
    ids = sorted(embeddings)
    n = len(ids)
    if not 1 <= k <= n:
        raise EvaluationError(f"k must lie in [1, {n}], got {k}")
    parent = list(range(2 * n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n > 1:
        Z = linkage(_matrix(embeddings, ids), method="ward")
        for step, (a, b) in enumerate(Z[: n - k, :2].astype(int)):
            parent[find(a)] = n + step
            parent[find(b)] = n + step
    roots = {r: find(i) for i, r in enumerate(ids)}
    return WeightedClustering.from_labels(roots, areas)


def _probabilities(c: WeightedClustering) -> np.ndarray:
    w = np.zeros(c.k)
    for r, l in c.labels.items():
        w[l] += c.weights[r]
    return w / w.sum()


def weighted_contingency(u: WeightedClustering, v: WeightedClustering) -> np.ndarray:
    if set(u.labels) != set(v.labels):
        raise EvaluationError("clusterings cover different region sets")
    for r in u.labels:
        if not math.isclose(u.weights[r], v.weights[r], rel_tol=1e-12):
            raise EvaluationError(f"region {r} has different weights in the two clusterings")
    table = np.zeros((u.k, v.k))
    for r in u.labels:
        table[u.labels[r], v.labels[r]] += u.weights[r]
    return table


def weighted_entropy(c: WeightedClustering) -> float:
    p = _probabilities(c)
    p = p[p > 0]
    return float(max(-np.sum(p * np.log(p)), 0.0))


def _mi_from_table(table: np.ndarray) -> float:
    pij = table / table.sum()
    pi = pij.sum(axis=1, keepdims=True)
    pj = pij.sum(axis=0, keepdims=True)
    nz = pij > 0
    return float(max(np.sum(pij[nz] * np.log(pij[nz] / (pi @ pj)[nz])), 0.0))


def weighted_mutual_information(u: WeightedClustering, v: WeightedClustering) -> float:
    return _mi_from_table(weighted_contingency(u, v))


def expected_mutual_information(table: np.ndarray, n_units: float) -> float:
    """Expected MI under the permutation model, marginals given as (possibly
    fractional) counts summing to ``n_units``.

    Cell counts run over the integers admitted by the marginals; for
    fractional marginals the gamma-function hypergeometric weights are
    renormalized over that support. Integer marginals give the classical
    value.
    """
    N = float(n_units)
    p = table / table.sum()
    a = p.sum(axis=1) * N
    b = p.sum(axis=0) * N
    a = a[a > 0]
    b = b[b > 0]
    emi = 0.0
    lg_N = gammaln(N + 1)
    for ai in a:
        for bj in b:
            lo = max(1, math.ceil(ai + bj - N - 1e-9))
            hi = math.floor(min(ai, bj) + 1e-9)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            logw = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(N - ai + 1) + gammaln(N - bj + 1)
                - lg_N - gammaln(nij + 1) - gammaln(np.maximum(ai - nij, 0) + 1)
                - gammaln(np.maximum(bj - nij, 0) + 1) - gammaln(np.maximum(N - ai - bj + nij, 0) + 1)
            )
            w = np.exp(logw)
            lo_all = max(0, math.ceil(ai + bj - N - 1e-9))
            if lo_all == 0:
                # include the nij = 0 mass when normalizing
                w0 = math.exp(
                    gammaln(N - ai + 1) + gammaln(N - bj + 1) - lg_N - gammaln(max(N - ai - bj, 0) + 1)
                )
            else:
                w0 = 0.0
            total = w.sum() + w0
            if not np.isclose(ai, round(ai)) or not np.isclose(bj, round(bj)):
                w = w / total
            emi += float(np.sum(w * (nij / N) * np.log(N * nij / (ai * bj))))
    return emi


def _same_partition(table: np.ndarray) -> bool:
    nz = table > 0
    return bool(np.all(nz.sum(axis=1) <= 1) and np.all(nz.sum(axis=0) <= 1))


def adjusted_mutual_information(
    u: WeightedClustering,
    v: WeightedClustering,
    mode: str = "permutation",
    n_perm: int = 200,
    seed: int = 0,
) -> float:
    """Chance-adjusted MI with max-entropy normalization.

    ``analytic`` evaluates the permutation-model expectation with area
    weights rescaled to generalized counts (mean weight 1); ``permutation``
    averages the MI over ``n_perm`` seeded shuffles of ``v``'s labels
    across regions, each region keeping its area.
    """
    table = weighted_contingency(u, v)
    hu, hv = weighted_entropy(u), weighted_entropy(v)
    single_u, single_v = np.count_nonzero(table.sum(axis=1)) <= 1, np.count_nonzero(table.sum(axis=0)) <= 1
    if single_u and single_v:
        return 1.0
    if single_u or single_v:
        return 0.0
    if _same_partition(table):
        return 1.0
    mi = _mi_from_table(table)
    if mode == "analytic":
        emi = expected_mutual_information(table, len(u.labels))
    elif mode == "permutation":
        ids = u.region_ids()
        ul = np.array([u.labels[r] for r in ids])
        vl = np.array([v.labels[r] for r in ids])
        w = np.array([u.weights[r] for r in ids])
        r = seeding.rng(seed, "ami-permutation")
        acc = 0.0
        for _ in range(n_perm):
            t = np.zeros_like(table)
            np.add.at(t, (ul, r.permutation(vl)), w)
            acc += _mi_from_table(t)
        emi = acc / n_perm
    else:
        raise EvaluationError(f"unknown expected-MI mode {mode!r}")
    denom = max(hu, hv) - emi
    if abs(denom) < 1e-12:
        raise EvaluationError("AMI denominator vanishes")
    return float((mi - emi) / denom)


def clustering_inertia(X: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for l in np.unique(labels):
        pts = X[labels == l]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


def knee_point(ks: Sequence[int], values: Sequence[float]) -> int:
    """Point of a decreasing curve farthest below the chord joining its ends,
    after scaling both axes to [0, 1]."""
    x = np.asarray(ks, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if len(x) < 3 or y[0] == y[-1]:
        return int(x[0])
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / (y.max() - y.min())
    chord = yn[0] + (yn[-1] - yn[0]) * xn
    return int(x[int(np.argmax(chord - yn))])


def choose_k(embeddings: Mapping[str, np.ndarray], k_range: Iterable[int]) -> dict:
    ks = sorted(set(int(k) for k in k_range))
    ids = sorted(embeddings)
    n = len(ids)
    if not ks:
        raise EvaluationError("empty k range")
    if ks[0] < 2 or ks[-1] > n - 1:
        raise EvaluationError(f"k range must lie within [2, {n - 1}]")
    X = _matrix(embeddings, ids)
    inertia, silhouette = [], []
    for k in ks:
        c = ward_cluster(embeddings, k)
        labels = np.array([c.labels[r] for r in ids])
        inertia.append(clustering_inertia(X, labels))
        silhouette.append(float(silhouette_score(X, labels, metric="sqeuclidean")))
    return {
        "k": ks,
        "inertia": inertia,
        "silhouette": silhouette,
        "suggested_k": knee_point(ks, inertia),
        "silhouette_best_k": ks[int(np.argmax(silhouette))],
    }
