"""Residual 2-D conv encoders with statistics pooling.

Parameters are plain ``dict[str, torch.Tensor]`` keyed by stable names, which
keeps checkpointing and gradient checking a matter of iterating a dict.

Layout for ``channels=[c0, c1, ...]`` and ``blocks_per_stage=k``::

    stem         conv3x3 1 -> c0, ReLU
    stage0       k x residual block (conv3x3, ReLU, conv3x3, +skip, ReLU)
    stage1.down  conv3x3 c0 -> c1, stride 2, ReLU
    stage1       k x residual block
    ...
    pooling      mean and std over time of the (channel x freq) features
    proj         linear 2 * c_last * M' -> J

Input mels are (batch, T, M); the conv sees them as (batch, 1, T, M).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Literal, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .rng import stream

__all__ = [
    "EncoderConfig",
    "Embedding",
    "EMBEDDING_KINDS",
    "init_params",
    "encode",
    "param_shapes",
    "parameter_count",
    "pooled_dim",
    "kaiming_uniform",
]

Params = Dict[str, torch.Tensor]

EMBEDDING_KINDS = ("speaker", "language", "fused_spk", "fused_lng")

# variance floor inside the std pooling; keeps d(std)/d(var) bounded
STD_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    embed_dim: int = 64
    channels: Tuple[int, ...] = (16, 32)
    blocks_per_stage: int = 1
    pooling: Literal["mean_std"] = "mean_std"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.embed_dim < 8:
            raise ValueError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive ints")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be >= 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.pooling != "mean_std":
            raise ValueError(f"unsupported pooling {self.pooling!r}")


@dataclass
class Embedding:
    """An embedding (or a batch of them, shape (B, J)) tagged with its role."""

    values: torch.Tensor
    kind: str = field(default="speaker")

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if not torch.isfinite(self.values).all():
            raise ValueError(f"{self.kind} embedding contains non-finite values")

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()

    def __len__(self):
        return self.values.shape[-1]


def _downsampled(n: int, times: int) -> int:
    # conv3x3, padding 1, stride 2
    for _ in range(times):
        n = (n - 1) // 2 + 1
    return n


def pooled_dim(cfg: EncoderConfig) -> int:
    return 2 * cfg.channels[-1] * _downsampled(cfg.n_mels, len(cfg.channels) - 1)


def param_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    c = cfg.channels
    shapes = {"stem.weight": (c[0], 1, 3, 3), "stem.bias": (c[0],)}
    for s, ch in enumerate(c):
        if s > 0:
            shapes[f"stage{s}.down.weight"] = (ch, c[s - 1], 3, 3)
            shapes[f"stage{s}.down.bias"] = (ch,)
        for b in range(cfg.blocks_per_stage):
            for conv in ("conv1", "conv2"):
                shapes[f"stage{s}.block{b}.{conv}.weight"] = (ch, ch, 3, 3)
                shapes[f"stage{s}.block{b}.{conv}.bias"] = (ch,)
    shapes["proj.weight"] = (cfg.embed_dim, pooled_dim(cfg))
    shapes["proj.bias"] = (cfg.embed_dim,)
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def kaiming_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """He-uniform with fan-in over all but the leading axis, ReLU gain."""
    fan_in = math.prod(shape[1:])
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: EncoderConfig, seed: int, prefix: str = "", dtype=torch.float32) -> Params:
    """Kaiming-uniform weights, zero biases. Each tensor has its own random stream."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            value = kaiming_uniform(shape, stream(seed, f"init:{prefix}{name}"))
        params[prefix + name] = torch.tensor(value, dtype=dtype)
    return params


def _check_input(cfg: EncoderConfig, mel: torch.Tensor) -> torch.Tensor:
    if mel.ndim == 2:
        mel = mel.unsqueeze(0)
    if mel.ndim != 3:
        raise ValueError(f"mel must be (T, M) or (batch, T, M), got shape {tuple(mel.shape)}")
    if mel.shape[2] != cfg.n_mels:
        raise ValueError(f"mel has M={mel.shape[2]} bands but encoder expects n_mels={cfg.n_mels}")
    if mel.shape[1] < 4:
        raise ValueError(f"mel has T={mel.shape[1]} frames; encoder needs T >= 4")
    return mel


def encode(params: Params, mel, cfg: EncoderConfig, prefix: str = "") -> torch.Tensor:
    """Embed a (T, M) or (B, T, M) mel batch; returns (B, J)."""
    p = params
    x = torch.as_tensor(mel, dtype=p[prefix + "stem.weight"].dtype)
    x = _check_input(cfg, x).unsqueeze(1)
    h = F.relu(F.conv2d(x, p[prefix + "stem.weight"], p[prefix + "stem.bias"], padding=1))
    for s in range(len(cfg.channels)):
        if s > 0:
            name = f"{prefix}stage{s}.down"
            h = F.relu(F.conv2d(h, p[name + ".weight"], p[name + ".bias"], stride=2, padding=1))
        for b in range(cfg.blocks_per_stage):
            name = f"{prefix}stage{s}.block{b}"
            r = F.relu(F.conv2d(h, p[name + ".conv1.weight"], p[name + ".conv1.bias"], padding=1))
            r = F.conv2d(r, p[name + ".conv2.weight"], p[name + ".conv2.bias"], padding=1)
            h = F.relu(h + r)
    # (B, C, T', M') -> (B, C*M', T')
    batch, ch, t, m = h.shape
    h = h.permute(0, 1, 3, 2).reshape(batch, ch * m, t)
    mean = h.mean(dim=2)
    std = torch.sqrt(h.var(dim=2, unbiased=False) + STD_EPS)
    pooled = torch.cat([mean, std], dim=1)
    return F.linear(pooled, p[prefix + "proj.weight"], p[prefix + "proj.bias"])
