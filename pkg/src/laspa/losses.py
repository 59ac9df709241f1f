"""The four training losses and their weighted sum.

* ``aam_softmax_loss``  additive angular margin softmax on speaker embeddings
* ``nll_language_loss`` cross-entropy of an affine language classifier
* ``mapc``              mean absolute Pearson correlation between two batches
* ``mse_loss``          reconstruction error
"""

from __future__ import annotations

import math
from dataclasses import dataclass, astuple
from typing import Sequence

import torch

__all__ = [
    "LossReport",
    "aam_softmax_loss",
    "nll_language_loss",
    "mapc",
    "mse_loss",
    "total_loss",
    "COMPONENTS",
]

COMPONENTS = ("l_mse", "l_aam", "l_mapc", "l_nll")

NORM_EPS = 1e-12
VAR_EPS = 1e-12


@dataclass(frozen=True)
class LossReport:
    l_mse: float
    l_aam: float
    l_mapc: float
    l_nll: float
    total: float

    def as_row(self):
        return astuple(self)


def _check_labels(labels: torch.Tensor, n_classes: int, batch: int):
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {tuple(labels.shape)}")
    if batch and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{int(labels.min())}, {int(labels.max())}]")


def aam_softmax_loss(weight: torch.Tensor, emb: torch.Tensor, labels, scale: float = 30.0, margin: float = 0.2) -> torch.Tensor:
    """Mean cross-entropy over ``scale * cos`` with ``cos(theta_y + margin)`` on the target.

    theta is clamped to [0, pi - margin] so the target logit stays monotone in
    theta. ``cos(theta + m)`` is expanded as ``c cos m - sin(theta) sin m`` to
    stay exact at theta = 0.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    if not 0 <= margin < math.pi / 2:
        raise ValueError("margin must lie in [0, pi/2)")
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, weight.shape[0], emb.shape[0])
    emb_norm = emb.norm(dim=1, keepdim=True)
    w_norm = weight.norm(dim=1, keepdim=True)
    if (emb_norm < NORM_EPS).any():
        raise ValueError("zero-norm embedding in AAM softmax")
    if (w_norm < NORM_EPS).any():
        raise ValueError("zero-norm class row in AAM softmax")
    cos = (emb / emb_norm) @ (weight / w_norm).T
    cos = cos.clamp(-1.0, 1.0)

    c = cos.gather(1, labels[:, None]).squeeze(1)
    one_minus = 1.0 - c * c
    positive = one_minus > 0
    sin = torch.where(positive, torch.sqrt(torch.where(positive, one_minus, torch.ones_like(c))), torch.zeros_like(c))
    target = c * math.cos(margin) - sin * math.sin(margin)
    # theta > pi - m  <=>  c < cos(pi - m) = -cos m; the clamped logit is cos(pi) = -1
    target = torch.where(c < -math.cos(margin), torch.full_like(c, -1.0), target)

    logits = cos.scatter(1, labels[:, None], target[:, None]) * scale
    return (torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None]).squeeze(1)).mean()


def nll_language_loss(weight: torch.Tensor, bias: torch.Tensor, emb: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, weight.shape[0], emb.shape[0])
    logits = emb @ weight.T + bias
    return (torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None]).squeeze(1)).mean()


def _standardize(x: torch.Tensor) -> torch.Tensor:
    centered = x - x.mean(dim=0, keepdim=True)
    var = (centered * centered).mean(dim=0, keepdim=True)
    valid = var >= VAR_EPS
    std = torch.sqrt(torch.where(valid, var, torch.ones_like(var)))
    return torch.where(valid, centered / std, torch.zeros_like(centered))


def pearson_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(J_a, J_b) Pearson correlations across the batch; 0 for constant columns."""
    za, zb = _standardize(a), _standardize(b)
    return (za[:, :, None] * zb[:, None, :]).mean(dim=0)


def mapc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean of |rho_ij| over every (speaker dim i, language dim j) pair."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("mapc expects two (batch, dim) matrices")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise ValueError(f"mapc needs a batch of at least 3, got {a.shape[0]}")
    rho = pearson_matrix(a, b).abs()
    if rho.shape[0] == rho.shape[1]:
        # reductions are not layout-invariant, so build a matrix that is
        # elementwise identical for (a, b) and (b, a) before taking the mean
        rho = 0.5 * (rho + pearson_matrix(b, a).abs().T)
        rho = (0.5 * (rho + rho.T)).contiguous()
    return rho.mean()


def mse_loss(x, x_hat) -> torch.Tensor:
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: target {tuple(x.shape)} vs reconstruction {tuple(x_hat.shape)}")
    diff = x_hat - x
    return (diff * diff).mean()


def total_loss(l_mse, l_aam, l_mapc, l_nll, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> LossReport:
    """Weighted sum of the four components (unit weights by default)."""
    values = [float(v) for v in (l_mse, l_aam, l_mapc, l_nll)]
    for name, v in zip(COMPONENTS, values):
        if not math.isfinite(v):
            raise ValueError(f"loss component {name} is not finite ({v})")
    total = math.fsum(w * v for w, v in zip(weights, values))
    return LossReport(*values, total)
