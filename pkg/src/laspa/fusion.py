"""Prefix-tuned cross-attention between the speaker and language embeddings.

Each embedding is a single token. For one tuner, the query comes from one
stream and the key/value token from the other; ``prefix_len`` learned key and
value tokens are prepended, so every head attends over ``prefix_len + 1``
positions::

    weights = softmax(q_h . [P_k,h ; k_h]^T / sqrt(d_head))
    attn_h  = weights . [P_v,h ; v_h]
    out     = W_o concat_h(attn_h) + query

Prefixes are stored as (prefix_len, d_model) and split per head like the
projected keys. ``W_o`` starts at zero, so a fresh tuner is the identity on
its query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import torch

from .encoders import Embedding
from .rng import stream

__all__ = [
    "AttentionConfig",
    "TUNERS",
    "init_params",
    "param_shapes",
    "prefix_cross_attention",
    "fuse",
    "prefix_parameter_count",
]

Params = Dict[str, torch.Tensor]

# PT_spk: query from speaker, keys/values from language; PT_lang the reverse
TUNERS = ("pt_spk", "pt_lang")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    prefix_len: int = 4

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: AttentionConfig) -> Dict[str, tuple]:
    d = cfg.d_model
    shapes = {}
    for tuner in TUNERS:
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{tuner}.{w}"] = (d, d)
        shapes[f"{tuner}.p_k"] = (cfg.prefix_len, d)
        shapes[f"{tuner}.p_v"] = (cfg.prefix_len, d)
    return shapes


def prefix_parameter_count(cfg: AttentionConfig) -> int:
    return len(TUNERS) * 2 * cfg.prefix_len * cfg.d_model


def init_params(cfg: AttentionConfig, seed: int, prefix: str = "fusion.", dtype=torch.float32) -> Params:
    """Xavier-uniform q/k/v projections, zero output projection, N(0, 1) prefixes."""
    bound = math.sqrt(6.0 / (2 * cfg.d_model))
    params = {}
    for name, shape in param_shapes(cfg).items():
        rng = stream(seed, f"init:{prefix}{name}")
        kind = name.split(".")[1]
        if kind == "w_o":
            value = np.zeros(shape)
        elif kind in ("p_k", "p_v"):
            value = rng.normal(0.0, 1.0, size=shape)
        else:
            value = rng.uniform(-bound, bound, size=shape)
        params[prefix + name] = torch.tensor(value, dtype=dtype)
    return params


def _values(e) -> torch.Tensor:
    return e.values if isinstance(e, Embedding) else torch.as_tensor(e)


def prefix_cross_attention(
    tuner: Params,
    query,
    kv,
    n_heads: int,
    return_weights: bool = False,
):
    """One prefix-tuned cross-attention block.

    ``tuner`` holds ``w_q, w_k, w_v, w_o, p_k, p_v`` (unprefixed names).
    ``query`` and ``kv`` are (d,) or (B, d). Returns the fused embedding with
    the same leading shape, plus the (B, heads, prefix_len + 1) attention
    weights when ``return_weights`` is set.
    """
    q_in, kv_in = _values(query), _values(kv)
    single = q_in.ndim == 1
    q_in, kv_in = torch.atleast_2d(q_in), torch.atleast_2d(kv_in)
    d = tuner["w_q"].shape[0]
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise ValueError(
            f"embedding sizes {q_in.shape[-1]} (query) and {kv_in.shape[-1]} (key/value) must equal d_model={d}"
        )
    if q_in.shape[0] != kv_in.shape[0]:
        raise ValueError(f"batch sizes differ: {q_in.shape[0]} vs {kv_in.shape[0]}")
    if torch.isnan(q_in).any() or torch.isnan(kv_in).any():
        raise ValueError("NaN in attention inputs")
    if d % n_heads:
        raise ValueError(f"d_model={d} is not divisible by n_heads={n_heads}")
    batch, dh = q_in.shape[0], d // n_heads

    q = (q_in @ tuner["w_q"].T).view(batch, n_heads, 1, dh)
    k = (kv_in @ tuner["w_k"].T).view(batch, n_heads, 1, dh)
    v = (kv_in @ tuner["w_v"].T).view(batch, n_heads, 1, dh)
    n_prefix = tuner["p_k"].shape[0]
    pk = tuner["p_k"].view(n_prefix, n_heads, dh).transpose(0, 1).expand(batch, -1, -1, -1)
    pv = tuner["p_v"].view(n_prefix, n_heads, dh).transpose(0, 1).expand(batch, -1, -1, -1)
    keys = torch.cat([pk, k], dim=2)
    values = torch.cat([pv, v], dim=2)

    logits = (q * keys).sum(-1) / math.sqrt(dh)
    weights = torch.softmax(logits, dim=-1)
    attended = (weights.unsqueeze(-1) * values).sum(dim=2).reshape(batch, d)
    out = attended @ tuner["w_o"].T + q_in
    if single:
        out = out[0]
    return (out, weights) if return_weights else out


def tuner_params(params: Params, tuner: str, prefix: str = "fusion.") -> Params:
    lead = f"{prefix}{tuner}."
    return {k[len(lead):]: v for k, v in params.items() if k.startswith(lead)}


def fuse(params: Params, e_spk: Embedding, e_lng: Embedding, n_heads: int, prefix: str = "fusion.") -> Tuple[Embedding, Embedding]:
    """Run both tuners: (E_spk-lng, E_lng-spk)."""
    if not isinstance(e_spk, Embedding) or not isinstance(e_lng, Embedding):
        raise TypeError("fuse expects Embedding inputs")
    if e_spk.kind != "speaker" or e_lng.kind != "language":
        raise ValueError(
            f"fuse expects (speaker, language) embeddings, got ({e_spk.kind}, {e_lng.kind})"
        )
    spk_lng = prefix_cross_attention(tuner_params(params, "pt_spk", prefix), e_spk, e_lng, n_heads)
    lng_spk = prefix_cross_attention(tuner_params(params, "pt_lang", prefix), e_lng, e_spk, n_heads)
    return Embedding(spk_lng, "fused_spk"), Embedding(lng_spk, "fused_lng")
