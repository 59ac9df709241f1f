"""Recurrent mel reconstruction from the two fused embeddings.

The concatenated embedding is projected once and fed as the same input at
every step (constant-input conditioning); the hidden state starts at zero and
each step's hidden state is mapped to one mel frame by an affine layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Literal

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import Embedding
from .rng import stream

__all__ = ["DecoderConfig", "init_params", "param_shapes", "decode"]

Params = Dict[str, torch.Tensor]

_GATES = {"lstm": 4, "gru": 3}


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    hidden: int = 128
    n_mels: int = 40
    cell: Literal["lstm", "gru"] = "lstm"

    def __post_init__(self):
        if self.cell not in _GATES:
            raise ValueError(f"cell must be 'lstm' or 'gru', got {self.cell!r}")
        if min(self.embed_dim, self.hidden, self.n_mels) < 1:
            raise ValueError("decoder sizes must be positive")


def param_shapes(cfg: DecoderConfig) -> Dict[str, tuple]:
    h, g = cfg.hidden, _GATES[cfg.cell]
    return {
        "in_proj.weight": (h, 2 * cfg.embed_dim),
        "in_proj.bias": (h,),
        "cell.w_ih": (g * h, h),
        "cell.w_hh": (g * h, h),
        "cell.b_ih": (g * h,),
        "cell.b_hh": (g * h,),
        "out.weight": (cfg.n_mels, h),
        "out.bias": (cfg.n_mels,),
    }


def init_params(cfg: DecoderConfig, seed: int, prefix: str = "decoder.", dtype=torch.float32) -> Params:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("bias") or ".b_" in name:
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            value = stream(seed, f"init:{prefix}{name}").uniform(-bound, bound, size=shape)
        params[prefix + name] = torch.tensor(value, dtype=dtype)
    return params


def _lstm(gi, p, n_frames):
    h = gi.new_zeros(gi.shape[0], p["cell.w_hh"].shape[1])
    c = torch.zeros_like(h)
    states = []
    for _ in range(n_frames):
        gates = gi + F.linear(h, p["cell.w_hh"], p["cell.b_hh"])
        i, f, g, o = gates.chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        states.append(h)
    return states


def _gru(gi, p, n_frames):
    h = gi.new_zeros(gi.shape[0], p["cell.w_hh"].shape[1])
    gi_r, gi_z, gi_n = gi.chunk(3, dim=1)
    states = []
    for _ in range(n_frames):
        gh_r, gh_z, gh_n = F.linear(h, p["cell.w_hh"], p["cell.b_hh"]).chunk(3, dim=1)
        r = torch.sigmoid(gi_r + gh_r)
        z = torch.sigmoid(gi_z + gh_z)
        n = torch.tanh(gi_n + r * gh_n)
        h = (1 - z) * n + z * h
        states.append(h)
    return states


def decode(params: Params, e_spk_lng, e_lng_spk, n_frames: int, cfg: DecoderConfig, prefix: str = "decoder.") -> torch.Tensor:
    """Reconstruct (B, T, M) mels from two (B, J) fused embeddings (or (J,) -> (T, M))."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    a = e_spk_lng.values if isinstance(e_spk_lng, Embedding) else torch.as_tensor(e_spk_lng)
    b = e_lng_spk.values if isinstance(e_lng_spk, Embedding) else torch.as_tensor(e_lng_spk)
    single = a.ndim == 1
    a, b = torch.atleast_2d(a), torch.atleast_2d(b)
    if a.shape[-1] != cfg.embed_dim or b.shape[-1] != cfg.embed_dim:
        raise ValueError(
            f"fused embeddings have sizes {a.shape[-1]} and {b.shape[-1]}; decoder expects {cfg.embed_dim}"
        )
    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    z = torch.cat([a, b], dim=1)
    u = F.linear(z, p["in_proj.weight"], p["in_proj.bias"])
    gi = F.linear(u, p["cell.w_ih"], p["cell.b_ih"])
    states = (_lstm if cfg.cell == "lstm" else _gru)(gi, p, n_frames)
    out = F.linear(torch.stack(states, dim=1), p["out.weight"], p["out.bias"])
    return out[0] if single else out
