"""Flat, typed run configuration loaded from TOML."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregator import KINDS
from .io_utils import sha256_bytes
from .traffic import SLOT_NAMES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "run"
    seed: int = 0

    # inputs; relative paths resolve against the config file's directory
    synth_dir: str = "city"
    traffic: str = "city/traffic.csv"
    traffic_meta: str = "city/traffic_meta.json"
    categories: str = "city/categories.txt"
    grid: str = "city/grid.json"
    regions: str = "city/regions.geojson"
    landuse_labels: str = "city/landuse_truth.csv"
    density_labels: str = "city/density_truth.csv"
    archetype_labels: str = "city/archetype_truth.csv"

    synth_rows: int = 16
    synth_cols: int = 16
    synth_cell_size: float = 100.0
    synth_regions: int = 32
    synth_days: int = 14
    synth_noise: float = 0.2
    synth_density_sigma: float = 0.2
    synth_slot_dependent: bool = False

    step_minutes: int = 60
    slots: tuple[str, ...] = ("full",)

    ae_channels: tuple[int, ...] = (32, 32, 32)
    ae_kernel: int = 3
    ae_dilations: tuple[int, ...] = (1, 2, 4)
    ae_pool: int = 8
    ae_bottleneck: int = 44
    ae_lr: float = 1e-3
    ae_epochs: int = 100
    ae_batch_size: int = 64

    agg_kinds: tuple[str, ...] = ("transformer", "weighted_sum")
    agg_hops: int = 2
    agg_margin: float = 1.0
    agg_lr: float = 1e-4
    agg_epochs: int = 60
    agg_cap: int = 300
    agg_batch_size: int = 16
    agg_dim: int = 64
    agg_ff_dim: int = 128
    agg_l2_normalize: bool = False

    eval_repeats: int = 30
    landuse_split: tuple[int, ...] = (70, 10, 20)
    density_split: tuple[int, ...] = (80, 20)
    mlp_hidden: int = 512
    mlp_epochs: int = 100
    mlp_patience: int = 10
    mlp_lr: float = 1e-3
    rf_trees: int = 100
    cluster_k: tuple[int, ...] = (4,)
    ami_mode: str = "permutation"
    ami_perms: int = 200
    choose_k_min: int = 2
    choose_k_max: int = 12

    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.seed >= 0, "seed must be non-negative")
        need(min(self.synth_rows, self.synth_cols, self.synth_regions, self.synth_days) >= 1, "synth sizes must be >= 1")
        need(self.synth_cell_size > 0, "synth_cell_size must be positive")
        need(self.synth_noise >= 0 and self.synth_density_sigma >= 0, "synth noise levels must be >= 0")
        need(self.step_minutes >= 1, "step_minutes must be >= 1")
        need(len(self.slots) >= 1 and all(s in SLOT_NAMES for s in self.slots), f"slots must be a subset of {SLOT_NAMES}")
        need(len(set(self.slots)) == len(self.slots), "slots must not repeat")
        need(self.ae_bottleneck >= 1 and self.ae_kernel >= 2 and self.ae_pool >= 1, "invalid autoencoder shape")
        need(len(self.ae_channels) == len(self.ae_dilations) >= 1, "ae_channels and ae_dilations must align")
        need(self.ae_lr >= 0 and self.ae_epochs >= 0 and self.ae_batch_size >= 1, "invalid autoencoder training settings")
        need(len(self.agg_kinds) >= 1 and all(k in KINDS for k in self.agg_kinds), f"agg_kinds must be drawn from {KINDS}")
        need(self.agg_hops >= 1, "agg_hops must be >= 1")
        need(self.agg_margin >= 0, "agg_margin must be >= 0")
        need(self.agg_lr >= 0 and self.agg_epochs >= 0, "agg_lr and agg_epochs must be >= 0")
        need(min(self.agg_cap, self.agg_batch_size, self.agg_dim, self.agg_ff_dim) >= 1, "aggregator sizes must be >= 1")
        need(self.eval_repeats >= 2, "eval_repeats must be >= 2 for a standard deviation")
        need(len(self.landuse_split) == 3 and min(self.landuse_split) > 0, "landuse_split needs three positive parts")
        need(len(self.density_split) == 2 and min(self.density_split) > 0, "density_split needs two positive parts")
        need(self.mlp_hidden >= 1 and self.mlp_epochs >= 1 and self.mlp_patience >= 1 and self.mlp_lr > 0, "invalid MLP settings")
        need(self.rf_trees >= 1, "rf_trees must be >= 1")
        need(len(self.cluster_k) >= 1 and min(self.cluster_k) >= 1, "cluster_k must list positive k values")
        need(self.ami_mode in ("analytic", "permutation"), "ami_mode must be analytic or permutation")
        need(self.ami_perms >= 1, "ami_perms must be >= 1")
        need(2 <= self.choose_k_min <= self.choose_k_max, "need 2 <= choose_k_min <= choose_k_max")

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.path("out_dir")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("base_dir")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def subset_hash(self, keys: tuple[str, ...]) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        picked = {k: d[k] for k in sorted(d) if any(k == p or k.startswith(p) for p in keys)}
        return sha256_bytes(json.dumps(picked, sort_keys=True).encode())

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return sha256_bytes(json.dumps(d, sort_keys=True).encode())

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)


def load_config(path: str | Path, **overrides: Any) -> PipelineConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_mapping(raw, base_dir=str(path.parent), **overrides)


def config_from_mapping(raw: Mapping[str, Any], base_dir: str = ".", **overrides: Any) -> PipelineConfig:
    tables = sorted(k for k, v in raw.items() if isinstance(v, dict))
    if tables:
        raise ConfigError(f"config must be flat; keys {tables} hold tables")
    known = {f.name for f in fields(PipelineConfig)} - {"base_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    types = {f.name: f.type for f in fields(PipelineConfig)}
    for k, v in raw.items():
        t = types[k]
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "float": isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": isinstance(v, str),
            "bool": isinstance(v, bool),
        }.get(t, isinstance(v, list))
        if not ok:
            raise ConfigError(f"config key {k!r} expects {t}, got {type(v).__name__}")
    cfg = PipelineConfig(**raw, base_dir=base_dir)
    return cfg.with_overrides(**overrides) if overrides else cfg


def default_config_text() -> str:
    cfg = PipelineConfig()
    lines = ["# mtc-regions run configuration (flat key = value)"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
