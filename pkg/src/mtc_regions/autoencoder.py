"""Temporal-convolutional autoencoder producing per-cell embeddings.

Encoder: causal dilated conv blocks -> average pooling over time ->
linear map of the flattened pooled activations to the bottleneck.
Decoder mirrors it: linear -> nearest-neighbour upsampling -> conv blocks
-> 1x1 conv head back to the input channels.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import seeding
from .io_utils import array_bytes, load_array, pack_archive, unpack_archive, write_bytes_atomic
from .traffic import MultivariateSeries, NormStats

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TcnConfig:
    in_channels: int = 4
    seq_len: int = 336
    channels: tuple[int, ...] = (32, 32, 32)
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    pool: int = 8
    bottleneck: int = 44
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    double: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.kernel_size < 2:
            raise ConfigError(f"kernel size must be >= 2, got {self.kernel_size}")
        d = self.dilations
        if not d or any(x < 1 or x & (x - 1) for x in d) or any(a >= b for a, b in zip(d, d[1:])):
            raise ConfigError(f"dilations must be strictly increasing powers of two, got {d}")
        if len(self.channels) != len(d):
            raise ConfigError("one channel width per dilation is required")
        if self.pool < 1 or self.in_channels < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("pool, in_channels and batch_size must be positive; epochs and lr non-negative")
        self.check_length(self.seq_len)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def check_length(self, length: int) -> None:
        if length < self.receptive_field:
            raise ConfigError(
                f"series length {length} is shorter than the receptive field; need at least {self.receptive_field}"
            )
        if length % self.pool:
            raise ConfigError(f"series length {length} is not a multiple of the pooling factor {self.pool}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        return d


class CausalBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int):
        super().__init__()
        self.left_pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(c_in, c_out, kernel, dilation=dilation)
        self.res = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(F.pad(x, (self.left_pad, 0)))
        skip = x if self.res is None else self.res(x)
        return torch.relu(y + skip)


class TcnAutoencoder(nn.Module):
    def __init__(self, config: TcnConfig):
        super().__init__()
        self.config = config
        widths = (config.in_channels,) + config.channels
        self.enc_blocks = nn.ModuleList(
            CausalBlock(widths[i], widths[i + 1], config.kernel_size, d) for i, d in enumerate(config.dilations)
        )
        self.pooled_len = config.seq_len // config.pool
        flat = config.channels[-1] * self.pooled_len
        self.to_code = nn.Linear(flat, config.bottleneck)
        self.from_code = nn.Linear(config.bottleneck, flat)
        dec_widths = (config.channels[-1],) + tuple(reversed(config.channels))
        self.dec_blocks = nn.ModuleList(
            CausalBlock(dec_widths[i], dec_widths[i + 1], config.kernel_size, d)
            for i, d in enumerate(config.dilations)
        )
        self.head = nn.Conv1d(config.channels[0], config.in_channels, 1)
        self.log: list[float] = []
        self.norm_stats: NormStats | None = None
        self._init_params()
        if config.double:
            self.double()

    def _init_params(self) -> None:
        g = seeding.torch_generator(self.config.seed, "ae-init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") and "code" not in name:
                    p.zero_()
                    continue
                owner = self.get_submodule(name.rsplit(".", 1)[0])
                w = owner.weight
                fan_in = w.shape[1] * (w.shape[2] if w.dim() == 3 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=g) * 2 * bound - bound)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder activations before pooling, shape (B, channels[-1], L)."""
        for blk in self.enc_blocks:
            x = blk(x)
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self.config.check_length(x.shape[-1])
        if x.shape[-1] != self.config.seq_len:
            raise ConfigError(f"model expects length {self.config.seq_len}, got {x.shape[-1]}")
        h = F.avg_pool1d(self.features(x), self.config.pool)
        return self.to_code(h.flatten(1))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_code(z).view(z.shape[0], self.config.channels[-1], self.pooled_len)
        h = h.repeat_interleave(self.config.pool, dim=-1)
        for blk in self.dec_blocks:
            h = blk(h)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype


@dataclass(frozen=True)
class MtcEmbedding:
    cell_id: int
    vector: np.ndarray = field(compare=False)


def _as_tensor(model: TcnAutoencoder, series: Sequence[MultivariateSeries] | np.ndarray) -> torch.Tensor:
    if isinstance(series, np.ndarray):
        arr = series
    else:
        shapes = {mv.values.shape for mv in series}
        if len(shapes) != 1:
            raise ValueError(f"batch has mixed shapes {sorted(shapes)}")
        arr = np.stack([mv.values for mv in series])
    if arr.ndim != 3 or arr.shape[1] != model.config.in_channels:
        raise ValueError(f"expected (batch, {model.config.in_channels}, length), got {arr.shape}")
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=model.dtype)


def encode(model: TcnAutoencoder, mv: MultivariateSeries) -> MtcEmbedding:
    if not mv.normalized:
        raise ValueError(f"cell {mv.cell_id}: encode expects normalized input")
    model.config.check_length(mv.length)
    with torch.no_grad():
        z = model.encode(_as_tensor(model, [mv]))[0]
    return MtcEmbedding(mv.cell_id, z.double().numpy())


def reconstruction_loss(model: TcnAutoencoder, batch: Sequence[MultivariateSeries] | np.ndarray) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = _as_tensor(model, batch)
    with torch.no_grad():
        return float(F.mse_loss(model(x), x))


def train_autoencoder(
    config: TcnConfig, cells: Sequence[MultivariateSeries] | np.ndarray, norm_stats: NormStats | None = None
) -> TcnAutoencoder:
    """Fit with Adam on mean squared reconstruction error, seeded shuffling per epoch."""
    if len(cells) == 0:
        raise ValueError("at least one training cell is required")
    model = TcnAutoencoder(config)
    model.norm_stats = norm_stats
    x = _as_tensor(model, cells)
    config.check_length(x.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    g = seeding.torch_generator(config.seed, "ae-shuffle")
    n = x.shape[0]
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=g)
        total = 0.0
        for i in range(0, n, config.batch_size):
            xb = x[order[i : i + config.batch_size]]
            loss = F.mse_loss(model(xb), xb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * xb.shape[0]
        model.log.append(total / n)
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            logger.debug("ae epoch %d loss %.6f", epoch, model.log[-1])
    model.eval()
    return model


def embed_all(model: TcnAutoencoder, cells: Sequence[MultivariateSeries]) -> list[MtcEmbedding]:
    """Embed cells one at a time so results never depend on batch composition."""
    out = []
    for mv in cells:
        try:
            out.append(encode(model, mv))
        except (ValueError, ConfigError) as e:
            raise type(e)(f"cell {mv.cell_id}: {e}") from e
    return out


# --- persistence -------------------------------------------------------------

def save_checkpoint(model: TcnAutoencoder, path: str | Path) -> None:
    members = {f"params/{k}.npy": array_bytes(v.detach().cpu().numpy()) for k, v in model.state_dict().items()}
    members["config.json"] = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    members["log.json"] = json.dumps(model.log).encode()
    if model.norm_stats is not None:
        members["norm_stats.json"] = json.dumps(model.norm_stats.to_dict(), sort_keys=True).encode()
    write_bytes_atomic(path, pack_archive(members))


def load_checkpoint(path: str | Path) -> TcnAutoencoder:
    members = unpack_archive(path)
    cfg = json.loads(members["config.json"])
    model = TcnAutoencoder(TcnConfig(**cfg))
    state = {
        name[len("params/") : -len(".npy")]: torch.from_numpy(load_array(data))
        for name, data in members.items()
        if name.startswith("params/")
    }
    model.load_state_dict(state)
    model.log = json.loads(members["log.json"])
    if "norm_stats.json" in members:
        model.norm_stats = NormStats.from_dict(json.loads(members["norm_stats.json"]))
    model.eval()
    return model


def write_embeddings_csv(embeddings: Sequence[MtcEmbedding], path: str | Path) -> None:
    dim = len(embeddings[0].vector)
    lines = [",".join(["cell_id"] + [f"z_{i}" for i in range(dim)])]
    for e in embeddings:
        lines.append(",".join([str(e.cell_id)] + [repr(float(v)) for v in e.vector]))
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode())


def read_embeddings_csv(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out
