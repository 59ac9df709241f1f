"""Joint training of encoders, prefix tuners, decoder and classifier heads.

All trainable tensors live in one flat ``dict`` whose keys carry a component
prefix (``spk_encoder.``, ``lng_encoder.``, ``fusion.``, ``decoder.``,
``spk_head.``, ``lng_head.``). The optimizer, the checkpoint writer and the
gradient checker only ever iterate that dict.

Three model variants share the code path:

``full``          everything, as trained normally
``no_prefix``     identical, but both tuners have zero prefix tokens
``speaker_only``  speaker encoder + AAM head; no language branch, fusion,
                  decoder, MAPC, NLL or MSE
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from . import decoder as dec
from . import encoders as enc
from . import fusion as fus
from .encoders import Embedding, EncoderConfig
from .decoder import DecoderConfig
from .fusion import AttentionConfig
from .losses import LossReport, aam_softmax_loss, mapc, mse_loss, nll_language_loss, total_loss
from .rng import stream

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "OptimizerConfig",
    "ModelState",
    "VARIANTS",
    "init_state",
    "forward_losses",
    "train_step",
    "train",
    "infer_speaker_embedding",
    "grad_check",
    "GradCheckReport",
    "METRICS_HEADER",
]

VARIANTS = ("full", "no_prefix", "speaker_only")
METRICS_HEADER = ("step", "epoch", "l_mse", "l_aam", "l_mapc", "l_nll", "total")

SPK, LNG = "spk_encoder.", "lng_encoder."


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    attention: AttentionConfig = AttentionConfig()
    decoder: DecoderConfig = DecoderConfig()
    n_speakers: int = 20
    n_languages: int = 3
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    loss_weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        j = self.encoder.embed_dim
        if self.attention.d_model != j or self.decoder.embed_dim != j:
            raise ValueError(
                f"embed_dim mismatch: encoder {j}, attention d_model {self.attention.d_model}, "
                f"decoder {self.decoder.embed_dim}"
            )
        if self.decoder.n_mels != self.encoder.n_mels:
            raise ValueError("decoder.n_mels must equal encoder.n_mels")
        if self.n_speakers < 2 or self.n_languages < 2:
            raise ValueError("need at least 2 speaker classes and 2 language classes")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights needs 4 entries (mse, aam, mapc, nll)")

    def with_variant(self, variant: str) -> "ModelConfig":
        """Config for an ablation variant; ``no_prefix`` drops the prefix tokens."""
        attention = self.attention
        if variant == "no_prefix":
            attention = replace(attention, prefix_len=0)
        return replace(self, variant=variant, attention=attention)

    @property
    def uses_language_branch(self) -> bool:
        return self.variant != "speaker_only"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4 (MAPC needs batch statistics)")
        if self.weight_decay < 0 or self.epsilon <= 0 or self.epochs < 0:
            raise ValueError("need weight_decay >= 0, epsilon > 0, epochs >= 0")


@dataclass
class ModelState:
    config: ModelConfig
    params: Dict[str, torch.Tensor]
    adam_m: Dict[str, torch.Tensor]
    adam_v: Dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    rejected_steps: int = 0
    calls: Counter = field(default_factory=Counter)

    def component(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameter_count(self) -> int:
        return sum(v.numel() for v in self.params.values())

    def prefix_parameter_count(self) -> int:
        return sum(v.numel() for k, v in self.params.items() if k.endswith((".p_k", ".p_v")))


def _head_init(shape, seed, name, dtype):
    value = enc.kaiming_uniform(shape, stream(seed, f"init:{name}"))
    return torch.tensor(value, dtype=dtype)


def init_state(cfg: ModelConfig, seed: int, dtype=torch.float32) -> ModelState:
    j = cfg.encoder.embed_dim
    params = enc.init_params(cfg.encoder, seed, SPK, dtype)
    params["spk_head.weight"] = _head_init((cfg.n_speakers, j), seed, "spk_head.weight", dtype)
    if cfg.uses_language_branch:
        params.update(enc.init_params(cfg.encoder, seed, LNG, dtype))
        params.update(fus.init_params(cfg.attention, seed, "fusion.", dtype))
        params.update(dec.init_params(cfg.decoder, seed, "decoder.", dtype))
        params["lng_head.weight"] = _head_init((cfg.n_languages, j), seed, "lng_head.weight", dtype)
        params["lng_head.bias"] = torch.zeros(cfg.n_languages, dtype=dtype)
    zeros = lambda: {k: torch.zeros_like(v) for k, v in params.items()}
    return ModelState(cfg, params, zeros(), zeros())


def forward_losses(params, cfg: ModelConfig, mels: torch.Tensor, spk_labels, lng_labels, calls: Optional[Counter] = None):
    """Return (components dict of scalar tensors, weighted total tensor)."""
    calls = calls if calls is not None else Counter()
    e_spk = enc.encode(params, mels, cfg.encoder, SPK)
    calls["speaker_encoder"] += 1
    l_aam = aam_softmax_loss(params["spk_head.weight"], e_spk, spk_labels, cfg.aam_scale, cfg.aam_margin)
    if not cfg.uses_language_branch:
        zero = l_aam.new_zeros(())
        parts = {"l_mse": zero, "l_aam": l_aam, "l_mapc": zero, "l_nll": zero}
        return parts, l_aam * cfg.loss_weights[1]

    e_lng = enc.encode(params, mels, cfg.encoder, LNG)
    calls["language_encoder"] += 1
    fused_spk, fused_lng = fus.fuse(
        params, Embedding(e_spk, "speaker"), Embedding(e_lng, "language"), cfg.attention.n_heads
    )
    calls["fusion"] += 1
    x_hat = dec.decode(params, fused_spk, fused_lng, mels.shape[1], cfg.decoder)
    calls["decoder"] += 1
    parts = {
        "l_mse": mse_loss(mels, x_hat),
        "l_aam": l_aam,
        "l_mapc": mapc(e_spk, e_lng),
        "l_nll": nll_language_loss(params["lng_head.weight"], params["lng_head.bias"], e_lng, lng_labels),
    }
    w = cfg.loss_weights
    total = w[0] * parts["l_mse"] + w[1] * parts["l_aam"] + w[2] * parts["l_mapc"] + w[3] * parts["l_nll"]
    return parts, total


def _batch_tensors(batch, dtype):
    if isinstance(batch, tuple):
        mels, spk, lng = batch
        return torch.as_tensor(mels, dtype=dtype), torch.as_tensor(spk), torch.as_tensor(lng)
    lengths = {u.mel.n_frames for u in batch}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes utterance lengths {sorted(lengths)}")
    mels = torch.as_tensor(np.stack([u.mel.frames for u in batch]), dtype=dtype)
    spk = torch.tensor([u.speaker_id for u in batch])
    lng = torch.tensor([u.language_id for u in batch])
    return mels, spk, lng


def _report(parts, cfg) -> LossReport:
    return total_loss(*(parts[k].item() for k in ("l_mse", "l_aam", "l_mapc", "l_nll")), weights=cfg.loss_weights)


def train_step(state: ModelState, batch, opt: OptimizerConfig):
    """One optimizer step on ``batch`` (a list of Utterance or (mels, spk, lng)).

    Returns ``(state, report, accepted)``. A step whose loss or gradient is
    not finite is rejected: parameters, moments and counters stay untouched
    and ``report`` is None.
    """
    dtype = next(iter(state.params.values())).dtype
    mels, spk, lng = _batch_tensors(batch, dtype)
    if mels.shape[0] < 4:
        raise ValueError(f"batch size {mels.shape[0]} < 4")
    names = list(state.params)
    leaves = {k: v.detach().requires_grad_(True) for k, v in state.params.items()}
    try:
        parts, total = forward_losses(leaves, state.config, mels, spk, lng, state.calls)
        grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    except ValueError as exc:
        log.warning("step %d rejected: %s", state.step, exc)
        state.rejected_steps += 1
        return state, None, False
    grads = [torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(names, grads)]
    finite = torch.isfinite(total) and all(bool(torch.isfinite(g).all()) for g in grads)
    if not finite:
        log.warning("step %d rejected: non-finite loss or gradient", state.step)
        state.rejected_steps += 1
        return state, None, False

    t = state.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    with torch.no_grad():
        for name, g in zip(names, grads):
            p, m, v = state.params[name], state.adam_m[name], state.adam_v[name]
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            # decoupled decay, not scaled by the learning rate
            p.mul_(1.0 - opt.weight_decay)
            denom = (v / bc2).sqrt_().add_(opt.epsilon)
            p.addcdiv_(m, denom, value=-opt.learning_rate / bc1)
    state.step = t
    return state, _report(parts, state.config), True


def corpus_tensors(corpus, dtype=torch.float32):
    return _batch_tensors(list(corpus), dtype)


def _append_metrics(path: Path, rows):
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def format_metrics_row(step: int, epoch: int, report: Optional[LossReport]):
    if report is None:
        return [step, epoch] + ["nan"] * 5
    return [step, epoch] + [repr(x) for x in report.as_row()]


def train(
    model_cfg: ModelConfig,
    opt: OptimizerConfig,
    corpus,
    seed: int,
    state: Optional[ModelState] = None,
    metrics_path=None,
    checkpoint_dir=None,
    digest: bytes = b"",
    on_epoch: Optional[Callable[[ModelState, list], None]] = None,
):
    """Train for ``opt.epochs`` epochs (resuming from ``state.epoch`` if given).

    Returns ``(state, rows)`` where ``rows`` are the metrics rows produced by
    this call, in CSV column order. Batches are drawn by a per-epoch seeded
    permutation; the final partial batch is dropped.
    """
    from .io import save_checkpoint

    state = state if state is not None else init_state(model_cfg, seed)
    mels, spk, lng = corpus_tensors(corpus)
    n = mels.shape[0]
    steps_per_epoch = n // opt.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"corpus of {n} utterances is smaller than one batch ({opt.batch_size})")
    metrics_path = Path(metrics_path) if metrics_path else None
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    rows = []
    while state.epoch < opt.epochs:
        epoch = state.epoch
        order = torch.from_numpy(stream(seed, "shuffle", epoch).permutation(n))
        epoch_rows = []
        for b in range(steps_per_epoch):
            idx = order[b * opt.batch_size:(b + 1) * opt.batch_size]
            state, report, _ = train_step(state, (mels[idx], spk[idx], lng[idx]), opt)
            global_step = epoch * steps_per_epoch + b + 1
            epoch_rows.append(format_metrics_row(global_step, epoch + 1, report))
        state.epoch = epoch + 1
        rows.extend(epoch_rows)
        if metrics_path is not None:
            _append_metrics(metrics_path, epoch_rows)
        last = epoch_rows[-1]
        log.info("epoch %d/%d total=%s", state.epoch, opt.epochs, last[-1])
        if checkpoint_dir is not None and (
            state.epoch == opt.epochs or (opt.checkpoint_every and state.epoch % opt.checkpoint_every == 0)
        ):
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(checkpoint_dir / f"epoch{state.epoch:04d}.lspc", state, digest)
        if on_epoch is not None:
            on_epoch(state, epoch_rows)
    return state, rows


def infer_speaker_embedding(state: ModelState, mel) -> Embedding:
    """Speaker encoder only; language encoder, tuners and decoder are not touched."""
    frames = getattr(mel, "frames", mel)
    with torch.no_grad():
        e = enc.encode(state.params, frames, state.config.encoder, SPK)
    state.calls["speaker_encoder"] += 1
    return Embedding(e[0] if e.shape[0] == 1 and np.ndim(frames) == 2 else e, "speaker")


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def failures(self) -> List[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        return [
            f"{'ok  ' if e < self.tolerance else 'FAIL'} {name:<40s} max_rel_err={e:.3e}"
            for name, e in self.errors.items()
        ]


def tiny_model_config(cell: str = "lstm") -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(n_mels=8, embed_dim=8, channels=(4,), blocks_per_stage=1),
        attention=AttentionConfig(d_model=8, n_heads=2, prefix_len=2),
        decoder=DecoderConfig(embed_dim=8, hidden=8, n_mels=8, cell=cell),
        n_speakers=3,
        n_languages=2,
    )


def _randomized(state: ModelState, seed: int) -> Dict[str, torch.Tensor]:
    # perturb every tensor so that zero-initialised ones (biases, W_o) carry signal
    out = {}
    for name, p in state.params.items():
        noise = stream(seed, f"gradcheck:{name}").normal(0.0, 0.3, size=tuple(p.shape))
        out[name] = (p + torch.tensor(noise, dtype=p.dtype)).detach()
    return out


def autograd_gradients(params, cfg, batch) -> Dict[str, torch.Tensor]:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    _, total = forward_losses(leaves, cfg, *batch)
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    return {k: torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(names, grads)}


def grad_check(
    cfg: Optional[ModelConfig] = None,
    seed: int = 0,
    n_frames: int = 6,
    batch_size: int = 6,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: Callable = autograd_gradients,
) -> GradCheckReport:
    """Compare analytic gradients of the total loss with central differences.

    Runs at float64 on a tiny model and one fixed batch. The error reported
    per tensor is ``max|g - g_fd| / max(max|g|, max|g_fd|, 1e-8)``.
    """
    cfg = cfg or tiny_model_config()
    if cfg.encoder.embed_dim > 16 or n_frames > 8 or cfg.encoder.n_mels > 8:
        raise ValueError("grad_check is meant for tiny configs (J <= 16, T <= 8, M <= 8)")
    state = init_state(cfg, seed, dtype=torch.float64)
    params = _randomized(state, seed)
    rng = stream(seed, "gradcheck:batch")
    mels = torch.tensor(rng.normal(size=(batch_size, n_frames, cfg.encoder.n_mels)))
    spk = torch.tensor(np.arange(batch_size) % cfg.n_speakers)
    lng = torch.tensor((np.arange(batch_size) // cfg.n_speakers) % cfg.n_languages)
    batch = (mels, spk, lng)

    grads = analytic(params, cfg, batch)

    def loss_at(p):
        with torch.no_grad():
            return forward_losses(p, cfg, *batch)[1].item()

    errors = {}
    for name, value in params.items():
        fd = torch.zeros_like(value)
        flat, fd_flat = value.view(-1), fd.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = loss_at(params)
            flat[i] = orig - h
            minus = loss_at(params)
            flat[i] = orig
            fd_flat[i] = (plus - minus) / (2 * h)
        g = grads[name]
        scale = max(g.abs().max().item(), fd.abs().max().item(), 1e-8)
        errors[name] = (g - fd).abs().max().item() / scale
    return GradCheckReport(errors, tolerance)
