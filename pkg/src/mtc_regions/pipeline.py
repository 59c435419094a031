"""Stage orchestration: a fixed DAG of idempotent stages writing into one run directory.

Each stage stages its outputs in a scratch directory and moves them into
place only after it succeeds. ``manifest.json`` records, per stage, a
fingerprint of the config fields and input files it consumed plus the
hash of every output; re-running a stage whose fingerprint and outputs
are unchanged is a no-op. Wall-clock timings live in ``timings.json`` so
the manifest itself is reproducible.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import __version__, seeding
from .aggregator import (
    AggregatorConfig,
    build_feature_matrix,
    embed_regions,
    train_aggregator,
    write_region_embeddings,
)
from .aggregator import load_checkpoint as load_agg
from .aggregator import save_checkpoint as save_agg
from .autoencoder import TcnConfig, embed_all, read_embeddings_csv, train_autoencoder, write_embeddings_csv
from .autoencoder import load_checkpoint as load_ae
from .autoencoder import save_checkpoint as save_ae
from .config import PipelineConfig
from .evaluation import (
    WeightedClustering,
    adjusted_mutual_information,
    choose_k,
    density_eval,
    landuse_eval,
    ward_cluster,
)
from .io_utils import dumps_json, load_arrays, save_arrays, sha256_file, write_text_atomic
from .synth import CitySpec, export_city, generate_city, read_archetype_csv, read_density_csv, read_landuse_csv
from .tessellation import (
    MtcGrid,
    RegionAdjacency,
    TargetTessellation,
    build_adjacency,
    intersect_grid,
    read_intersection_csv,
    read_regions_geojson,
    regions_feature_collection,
    write_intersection_csv,
)
from .traffic import (
    CategoryMap,
    MultivariateSeries,
    NormStats,
    aggregate_categories,
    downsample_sum,
    fit_norm_stats,
    normalize,
    read_traffic,
    slice_time_slot,
)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None, kind: str = "pipeline"):
        super().__init__(message)
        self.stage = stage
        self.kind = kind


class MissingDependency(PipelineError):
    def __init__(self, stage: str, required: str, detail: str = ""):
        msg = f"stage {stage!r} requires stage {required!r} to have run first"
        super().__init__(msg + (f" ({detail})" if detail else ""), stage, "missing-dependency")
        self.required = required


# --- stage outputs -------------------------------------------------------------

class Staging:
    """Collects a stage's outputs under a scratch directory, then commits them."""

    def __init__(self, out_dir: Path, stage: str):
        self.out_dir = out_dir
        self.root = out_dir / f".staging-{stage}"
        shutil.rmtree(self.root, ignore_errors=True)
        self.root.mkdir(parents=True)
        self.files: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return p

    def commit(self) -> dict[str, str]:
        hashes = {}
        for rel in sorted(self.files):
            src = self.root / rel
            dst = self.out_dir / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            hashes[rel] = sha256_file(src)
            os.replace(src, dst)
        shutil.rmtree(self.root, ignore_errors=True)
        return hashes

    def abort(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)


# --- run context ---------------------------------------------------------------

@dataclass
class Run:
    config: PipelineConfig

    @property
    def out(self) -> Path:
        return self.config.out_path

    def load_manifest(self) -> dict:
        p = self.out / "manifest.json"
        if p.exists():
            return json.loads(p.read_text())
        return {"tool_version": __version__, "stages": {}}

    def save_manifest(self, manifest: dict) -> None:
        manifest["tool_version"] = __version__
        manifest["config_hash"] = self.config.hash()
        write_text_atomic(self.out / "manifest.json", dumps_json(manifest))

    def record_timing(self, stage: str, seconds: float) -> None:
        p = self.out / "timings.json"
        t = json.loads(p.read_text()) if p.exists() else {}
        t[stage] = round(seconds, 3)
        write_text_atomic(p, dumps_json(t))

    # loaders shared across stages
    def tessellation(self) -> TargetTessellation:
        return read_regions_geojson(self.config.path("regions"))

    def grid(self) -> MtcGrid:
        return MtcGrid.from_dict(json.loads(self.config.path("grid").read_text()))


# --- stage implementations ---------------------------------------------------------

def _stage_synth(run: Run, st: Staging) -> None:
    c = run.config
    spec = CitySpec(
        n_rows=c.synth_rows, n_cols=c.synth_cols, cell_size=c.synth_cell_size, n_regions=c.synth_regions,
        days=c.synth_days, noise_sigma=c.synth_noise, density_sigma=c.synth_density_sigma,
        slot_dependent=c.synth_slot_dependent,
    )
    city = generate_city(spec, seeding.derive_seed(c.seed, "synth"))
    scratch = st.root / "city"
    manifest = export_city(city, scratch)
    target = c.path("synth_dir")
    target.mkdir(parents=True, exist_ok=True)
    for name in list(manifest["files"]) + ["manifest.json"]:
        os.replace(scratch / name, target / name)


def _cell_series(run: Run) -> list[MultivariateSeries]:
    c = run.config
    cmap = CategoryMap.read(c.path("categories"))
    raw = read_traffic(c.path("traffic"), c.path("traffic_meta"))
    step = timedelta(minutes=c.step_minutes)
    return [aggregate_categories([downsample_sum(ts, step) for ts in raw[cell]], cmap) for cell in sorted(raw)]


def _stage_preprocess(run: Run, st: Staging) -> None:
    grid, tess = run.grid(), run.tessellation()
    imap = intersect_grid(grid, tess)
    write_intersection_csv(imap, st.path("preprocess/intersection.csv"))
    adj = build_adjacency(tess)
    adj_doc = {"rule": adj.rule, "neighbors": {r: sorted(n) for r, n in sorted(adj.neighbors.items())}}
    st.path("preprocess/adjacency.json").write_text(dumps_json(adj_doc))
    st.path("preprocess/warnings.json").write_text(dumps_json({"regions_without_cells": imap.empty_regions}))
    series = _cell_series(run)
    for slot in run.config.slots:
        sliced = [slice_time_slot(mv, slot) for mv in series]
        stats = fit_norm_stats(sliced)
        normed = np.stack([normalize(mv, stats).values for mv in sliced])
        save_arrays(
            st.path(f"{slot}/series.npzip"),
            {"cell_ids": np.array([mv.cell_id for mv in sliced], dtype=np.int64), "values": normed},
            {"norm_stats": stats.to_dict(), "categories": list(sliced[0].categories), "slot": slot},
        )


def _load_series(run: Run, slot: str) -> tuple[np.ndarray, np.ndarray, dict]:
    arrays, extra = load_arrays(run.out / slot / "series.npzip")
    return arrays["cell_ids"], arrays["values"], extra


def _normed_series(cell_ids: np.ndarray, values: np.ndarray, categories: list[str]) -> list[MultivariateSeries]:
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
    return [
        MultivariateSeries(int(c), tuple(categories), epoch, timedelta(hours=1), v, normalized=True)
        for c, v in zip(cell_ids, values)
    ]


def _ae_config(c: PipelineConfig, slot: str, n_channels: int, length: int) -> TcnConfig:
    return TcnConfig(
        in_channels=n_channels, seq_len=length, channels=c.ae_channels, kernel_size=c.ae_kernel,
        dilations=c.ae_dilations, pool=c.ae_pool, bottleneck=c.ae_bottleneck, lr=c.ae_lr,
        epochs=c.ae_epochs, batch_size=c.ae_batch_size, seed=seeding.derive_seed(c.seed, "ae", slot),
    )


def _stage_train_ae(run: Run, st: Staging) -> None:
    for slot in run.config.slots:
        cell_ids, values, extra = _load_series(run, slot)
        cfg = _ae_config(run.config, slot, values.shape[1], values.shape[2])
        model = train_autoencoder(cfg, values, NormStats.from_dict(extra["norm_stats"]))
        save_ae(model, st.path(f"{slot}/ae.ckpt"))


def _stage_embed_cells(run: Run, st: Staging) -> None:
    for slot in run.config.slots:
        model = load_ae(run.out / slot / "ae.ckpt")
        cell_ids, values, extra = _load_series(run, slot)
        emb = embed_all(model, _normed_series(cell_ids, values, extra["categories"]))
        write_embeddings_csv(emb, st.path(f"{slot}/cell_embeddings.csv"))


def _load_adjacency(run: Run) -> RegionAdjacency:
    doc = json.loads((run.out / "preprocess" / "adjacency.json").read_text())
    return RegionAdjacency({r: frozenset(n) for r, n in doc["neighbors"].items()}, doc["rule"])


def _feature_matrices(run: Run, slot: str):
    c = run.config
    imap = read_intersection_csv(run.out / "preprocess" / "intersection.csv")
    cell_emb = {int(k): v for k, v in read_embeddings_csv(run.out / slot / "cell_embeddings.csv").items()}
    fseed = seeding.derive_seed(c.seed, "features", slot)
    return [
        build_feature_matrix(rid, ids, cell_emb, c.agg_cap, fseed)
        for rid, ids in sorted(imap.cells.items())
        if ids
    ]


def _agg_config(c: PipelineConfig, slot: str, kind: str, in_dim: int) -> AggregatorConfig:
    return AggregatorConfig(
        kind=kind, in_dim=in_dim, out_dim=c.agg_dim, ff_dim=c.agg_ff_dim, cap=c.agg_cap, margin=c.agg_margin,
        hops=c.agg_hops, lr=c.agg_lr, epochs=c.agg_epochs, batch_size=c.agg_batch_size,
        seed=seeding.derive_seed(c.seed, "agg", slot, kind), l2_normalize=c.agg_l2_normalize,
    )


def _stage_train_agg(run: Run, st: Staging) -> None:
    adj = _load_adjacency(run)
    for slot in run.config.slots:
        fms = _feature_matrices(run, slot)
        for kind in run.config.agg_kinds:
            model = train_aggregator(_agg_config(run.config, slot, kind, fms[0].X.shape[1]), fms, adj)
            save_agg(model, st.path(f"{slot}/{kind}/agg.ckpt"))


def _stage_embed_regions(run: Run, st: Staging) -> None:
    c = run.config
    for slot in c.slots:
        fms = _feature_matrices(run, slot)
        for kind in c.agg_kinds:
            ckpt = run.out / slot / kind / "agg.ckpt"
            model = load_agg(ckpt)
            prov = {
                "kind": kind, "slot": slot, "hops": model.config.hops, "margin": model.config.margin,
                "l2_normalize": model.config.l2_normalize,
                "seed": c.seed, "agg_seed": model.config.seed,
                "ae_seed": seeding.derive_seed(c.seed, "ae", slot),
                "feature_seed": seeding.derive_seed(c.seed, "features", slot),
                "checkpoints": {
                    "ae": sha256_file(run.out / slot / "ae.ckpt"),
                    "aggregator": sha256_file(ckpt),
                },
            }
            emb = embed_regions(model, fms, prov)
            write_region_embeddings(emb, st.path(f"{slot}/{kind}/region_embeddings.csv"))
            st.path(f"{slot}/{kind}/region_embeddings.provenance.json").write_text(dumps_json(prov))


def load_region_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    return read_embeddings_csv(path)


def _each_output(run: Run) -> Iterable[tuple[str, str, dict[str, np.ndarray]]]:
    for slot in run.config.slots:
        for kind in run.config.agg_kinds:
            yield slot, kind, load_region_embeddings(run.out / slot / kind / "region_embeddings.csv")


def _write_report(st: Staging, rel: str, report) -> None:
    st.path(rel + ".json").write_text(dumps_json(report.to_dict()))
    st.path(rel + ".txt").write_text(report.to_text())


def _stage_eval_landuse(run: Run, st: Staging) -> None:
    c = run.config
    labels = read_landuse_csv(c.path("landuse_labels"))
    for slot, kind, emb in _each_output(run):
        rep = landuse_eval(
            emb, labels, c.eval_repeats, c.landuse_split, seeding.derive_seed(c.seed, "eval-landuse"),
            c.mlp_epochs, c.mlp_patience, c.mlp_hidden, c.mlp_lr,
        )
        rep.config.update(slot=slot, kind=kind)
        _write_report(st, f"{slot}/{kind}/eval_landuse", rep)


def _stage_eval_density(run: Run, st: Staging) -> None:
    c = run.config
    labels = read_density_csv(c.path("density_labels"))
    for slot, kind, emb in _each_output(run):
        rep = density_eval(emb, labels, c.eval_repeats, c.density_split, seeding.derive_seed(c.seed, "eval-density"), c.rf_trees)
        rep.config.update(slot=slot, kind=kind)
        _write_report(st, f"{slot}/{kind}/eval_density", rep)


def write_clustering_csv(clustering: WeightedClustering, path: str | Path) -> None:
    lines = ["region_id,cluster"] + [f"{r},{clustering.labels[r]}" for r in clustering.region_ids()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_clustering_csv(path: str | Path, areas: Mapping[str, float] | None = None) -> WeightedClustering:
    labels = {}
    for line in Path(path).read_text().splitlines()[1:]:
        rid, lab = line.split(",")
        labels[rid] = int(lab)
    k = max(labels.values()) + 1
    w = {r: 1.0 for r in labels} if areas is None else {r: float(areas[r]) for r in labels}
    return WeightedClustering(labels, w, k)


def emit_cluster_map(clustering: WeightedClustering, tess: TargetTessellation, path: str | Path) -> dict:
    """GeoJSON with one feature per clustered region carrying ``cluster`` and ``area_m2``."""
    known = set(tess.region_ids)
    missing = sorted(set(clustering.labels) - known)
    if missing:
        raise PipelineError(f"clustered regions missing from the tessellation: {missing}", kind="id-mismatch")
    sub = TargetTessellation(tuple(r for r in tess.regions if r.region_id in clustering.labels))
    doc = regions_feature_collection(sub, {r: {"cluster": clustering.labels[r]} for r in clustering.labels})
    Path(path).write_text(json.dumps(doc) + "\n")
    return doc


def read_cluster_map(path: str | Path) -> dict[str, int]:
    doc = json.loads(Path(path).read_text())
    return {f["properties"]["region_id"]: int(f["properties"]["cluster"]) for f in doc["features"]}


def _stage_cluster(run: Run, st: Staging) -> None:
    tess = run.tessellation()
    areas = tess.areas()
    for slot, kind, emb in _each_output(run):
        for k in run.config.cluster_k:
            cl = ward_cluster(emb, k, areas)
            write_clustering_csv(cl, st.path(f"{slot}/{kind}/clusters_k{k}.csv"))
            emit_cluster_map(cl, tess, st.path(f"{slot}/{kind}/clusters_k{k}.geojson"))


def _reference_clusterings(run: Run, slot: str, k: int, areas: Mapping[str, float], ids: list[str]) -> dict:
    c = run.config
    refs = {}
    if c.path("landuse_labels").exists():
        lu = read_landuse_csv(c.path("landuse_labels"))
        refs["landuse"] = ward_cluster({r: lu[r] for r in ids}, k, areas)
    if c.path("archetype_labels").exists():
        arch = read_archetype_csv(c.path("archetype_labels"))[slot]
        refs["archetype"] = WeightedClustering.from_labels({r: arch[r] for r in ids}, areas)
    return refs


def _stage_ami(run: Run, st: Staging) -> None:
    c = run.config
    areas = run.tessellation().areas()
    for slot, kind, emb in _each_output(run):
        out = {"mode": c.ami_mode, "perms": c.ami_perms, "slot": slot, "kind": kind, "scores": {}}
        for k in c.cluster_k:
            cl = read_clustering_csv(run.out / slot / kind / f"clusters_k{k}.csv", areas)
            refs = _reference_clusterings(run, slot, k, areas, cl.region_ids())
            out["scores"][str(k)] = {
                name: adjusted_mutual_information(cl, ref, c.ami_mode, c.ami_perms, seeding.derive_seed(c.seed, "ami"))
                for name, ref in refs.items()
            }
        st.path(f"{slot}/{kind}/ami.json").write_text(dumps_json(out))


def _stage_choose_k(run: Run, st: Staging) -> None:
    c = run.config
    for slot, kind, emb in _each_output(run):
        hi = min(c.choose_k_max, len(emb) - 1)
        diag = choose_k(emb, range(c.choose_k_min, hi + 1))
        st.path(f"{slot}/{kind}/choose_k.json").write_text(dumps_json(diag))


def _maybe_json(p: Path):
    return json.loads(p.read_text()) if p.exists() else None


def _stage_report(run: Run, st: Staging) -> None:
    c = run.config
    areas = run.tessellation().areas()
    doc = {"config": {k: v for k, v in c.to_dict().items() if k != "out_dir"}, "config_hash": c.hash(), "results": {}, "cross_slot_ami": {}}
    lines = ["mtc-regions report", f"config hash {c.hash()}", ""]
    for slot in c.slots:
        for kind in c.agg_kinds:
            d = run.out / slot / kind
            entry = {
                "landuse": (_maybe_json(d / "eval_landuse.json") or {}).get("summary"),
                "density": (_maybe_json(d / "eval_density.json") or {}).get("summary"),
                "ami": (_maybe_json(d / "ami.json") or {}).get("scores"),
                "choose_k": _maybe_json(d / "choose_k.json"),
            }
            doc["results"][f"{slot}/{kind}"] = entry
            lines.append(f"[{slot} / {kind}]")
            for task, metrics in (("landuse", entry["landuse"]), ("density", entry["density"])):
                if metrics:
                    for name in sorted(metrics):
                        m = metrics[name]
                        val = "undefined" if m["mean"] is None else f"{m['mean']:.5f}"
                        sd = "" if m["std"] is None else f" +/- {m['std']:.5f}"
                        lines.append(f"  {task:<8} {name:<22} {val}{sd}")
            if entry["ami"]:
                for k, scores in entry["ami"].items():
                    for ref, v in sorted(scores.items()):
                        lines.append(f"  ami      k={k:<3} vs {ref:<15} {v:.4f}")
            if entry["choose_k"]:
                ck = entry["choose_k"]
                lines.append(f"  choose-k elbow={ck['suggested_k']} silhouette_best={ck['silhouette_best_k']}")
            lines.append("")
    for kind in c.agg_kinds:
        for k in c.cluster_k:
            present = [s for s in c.slots if (run.out / s / kind / f"clusters_k{k}.csv").exists()]
            for i, a in enumerate(present):
                for b in present[i + 1 :]:
                    ua = read_clustering_csv(run.out / a / kind / f"clusters_k{k}.csv", areas)
                    ub = read_clustering_csv(run.out / b / kind / f"clusters_k{k}.csv", areas)
                    v = adjusted_mutual_information(ua, ub, c.ami_mode, c.ami_perms, seeding.derive_seed(c.seed, "ami"))
                    doc["cross_slot_ami"][f"{kind}/k{k}/{a}~{b}"] = v
                    lines.append(f"cross-slot ami {kind} k={k} {a} vs {b}: {v:.4f}")
    st.path("report.json").write_text(dumps_json(doc))
    st.path("report.txt").write_text("\n".join(lines) + "\n")


# --- DAG --------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[Run, Staging], None]
    deps: tuple[str, ...]
    config_keys: tuple[str, ...]
    inputs: tuple[str, ...] = ()  # config path fields read by the stage


STAGES: dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("synth", _stage_synth, (), ("seed", "synth_")),
        Stage("preprocess", _stage_preprocess, (), ("step_minutes", "slots"),
              ("traffic", "traffic_meta", "categories", "grid", "regions")),
        Stage("train-ae", _stage_train_ae, ("preprocess",), ("seed", "slots", "ae_")),
        Stage("embed-cells", _stage_embed_cells, ("train-ae",), ("slots",)),
        Stage("train-agg", _stage_train_agg, ("embed-cells",), ("seed", "slots", "agg_")),
        Stage("embed-regions", _stage_embed_regions, ("train-agg",), ("seed", "slots", "agg_")),
        Stage("eval-landuse", _stage_eval_landuse, ("embed-regions",),
              ("seed", "slots", "agg_kinds", "eval_repeats", "landuse_split", "mlp_"), ("landuse_labels",)),
        Stage("eval-density", _stage_eval_density, ("embed-regions",),
              ("seed", "slots", "agg_kinds", "eval_repeats", "density_split", "rf_"), ("density_labels",)),
        Stage("cluster", _stage_cluster, ("embed-regions",), ("slots", "agg_kinds", "cluster_k"), ("regions",)),
        Stage("ami", _stage_ami, ("cluster",), ("seed", "slots", "agg_kinds", "cluster_k", "ami_"),
              ("regions", "landuse_labels", "archetype_labels")),
        Stage("choose-k", _stage_choose_k, ("embed-regions",), ("slots", "agg_kinds", "choose_k_")),
        Stage("report", _stage_report, ("embed-regions",), ("",), ("regions",)),
    )
}
STAGE_ORDER = tuple(STAGES)


def _check_acyclic() -> None:
    seen: set[str] = set()
    for name in STAGE_ORDER:
        for d in STAGES[name].deps:
            if d not in seen:
                raise AssertionError(f"stage {name} depends on later stage {d}")
        seen.add(name)


_check_acyclic()


def _input_hashes(run: Run, stage: Stage) -> dict[str, str]:
    out = {}
    for f in stage.inputs:
        p = run.config.path(f)
        if p.exists():
            out[f] = sha256_file(p)
        elif f in ("archetype_labels",):
            continue
        elif stage.name != "synth" and run.config.path("synth_dir") in p.parents:
            raise MissingDependency(stage.name, "synth", f"{p} not found")
        else:
            raise PipelineError(f"input file {p} not found", stage.name, "missing-input")
    return out


def _fingerprint(run: Run, stage: Stage, manifest: dict) -> dict:
    deps = {d: manifest["stages"][d]["outputs"] for d in stage.deps}
    fp = {
        "config": run.config.subset_hash(stage.config_keys),
        "inputs": _input_hashes(run, stage),
        "deps": {d: sorted(o.items()) for d, o in deps.items()},
    }
    # compare in the same shape the manifest stores
    return json.loads(json.dumps(fp))


def _outputs_intact(run: Run, record: dict) -> bool:
    for rel, h in record["outputs"].items():
        p = (run.out / rel).resolve()
        if not p.exists() or sha256_file(p) != h:
            return False
    return True


def run_stage(name: str, config: PipelineConfig) -> dict:
    """Run one stage; returns the manifest entry for it."""
    if name not in STAGES:
        raise PipelineError(f"unknown stage {name!r}; expected one of {STAGE_ORDER}", name, "usage")
    stage = STAGES[name]
    run = Run(config)
    run.out.mkdir(parents=True, exist_ok=True)
    manifest = run.load_manifest()
    for d in stage.deps:
        rec = manifest["stages"].get(d)
        if rec is None or not _outputs_intact(run, rec):
            raise MissingDependency(name, d)
        if name != "report" and not set(config.slots) <= set(rec.get("slots", config.slots)):
            raise MissingDependency(name, d, f"slots {sorted(set(config.slots) - set(rec['slots']))} not produced")
    fp = _fingerprint(run, stage, manifest)
    prev = manifest["stages"].get(name)
    if prev is not None and prev.get("fingerprint") == fp and _outputs_intact(run, prev):
        logger.info("stage %s up to date", name)
        return prev
    t0 = time.perf_counter()
    staging = Staging(run.out, name)
    try:
        stage.run(run, staging)
        outputs = staging.commit()
    except PipelineError:
        staging.abort()
        raise
    except Exception as e:
        staging.abort()
        raise PipelineError(f"{type(e).__name__}: {e}", name, "stage-failed") from e
    if name == "synth":
        d = config.path("synth_dir")
        outputs = {os.path.relpath(d / f, run.out): sha256_file(d / f) for f in sorted(os.listdir(d))}
    record = {"fingerprint": fp, "outputs": outputs, "slots": list(config.slots)}
    manifest["stages"][name] = record
    if prev is None or prev["outputs"] != outputs:
        # downstream records are stale once this stage's outputs change
        for other in STAGE_ORDER:
            if name in _ancestors(other):
                manifest["stages"].pop(other, None)
    run.save_manifest(manifest)
    run.record_timing(name, time.perf_counter() - t0)
    return record


def _ancestors(name: str) -> set[str]:
    out: set[str] = set()
    stack = list(STAGES[name].deps)
    while stack:
        d = stack.pop()
        if d not in out:
            out.add(d)
            stack.extend(STAGES[d].deps)
    return out


def run_all(config: PipelineConfig, stages: Iterable[str] | None = None) -> dict:
    for name in stages or STAGE_ORDER:
        run_stage(name, config)
    return Run(config).load_manifest()
