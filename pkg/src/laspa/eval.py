"""Verification scoring, EER / minDCF, the language probe and the ablation runner."""

from __future__ import annotations

import io as _io
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np
import torch

from .encoders import Embedding
from .rng import stream
from .synthcorpus import TrialList, Utterance
from .training import ModelConfig, ModelState, OptimizerConfig, infer_speaker_embedding, train

log = logging.getLogger(__name__)

__all__ = [
    "ScoreSet",
    "DcfConfig",
    "TrialList",
    "cosine_score",
    "score_trials",
    "error_rates",
    "eer",
    "min_dcf",
    "slr_probe",
    "embed_corpus",
    "cross_lingual_similarity",
    "AblationResult",
    "run_ablation",
    "ABLATION_LABELS",
]

ABLATION_LABELS = {
    "full": "LASPA (Full Model)",
    "no_prefix": "No Prefix-Tuning",
    "speaker_only": "Speaker-only",
}


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray
    # (utt_a, utt_b, score, is_target) in trial order, for score files
    rows: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64)

    def _validate(self):
        if self.target_scores.size == 0 or self.nontarget_scores.size == 0:
            raise ValueError(
                f"need target and non-target scores, got {self.target_scores.size} and {self.nontarget_scores.size}"
            )
        if not (np.isfinite(self.target_scores).all() and np.isfinite(self.nontarget_scores).all()):
            raise ValueError("scores must be finite")


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


def _as_vector(e) -> np.ndarray:
    v = e.values if isinstance(e, Embedding) else e
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype=np.float64).ravel()


def cosine_score(e1, e2) -> float:
    a, b = _as_vector(e1), _as_vector(e2)
    if a.shape != b.shape:
        raise ValueError(f"embedding lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("cosine score of a near-zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(state: ModelState, corpus: Sequence[Utterance], trials: TrialList, cache: bool = True) -> ScoreSet:
    """Cosine-score every trial with speaker-encoder embeddings (each utterance embedded once)."""
    by_id = {u.utt_id: u for u in corpus}
    for uid in trials.utterance_ids():
        if uid not in by_id:
            raise KeyError(f"trial references unknown utterance {uid!r}")
    memo: Dict[str, Embedding] = {}

    def embed(uid):
        if not cache:
            return infer_speaker_embedding(state, by_id[uid].mel)
        if uid not in memo:
            memo[uid] = infer_speaker_embedding(state, by_id[uid].mel)
        return memo[uid]

    tgt, non, rows = [], [], []
    for t in trials:
        s = cosine_score(embed(t.utt_a), embed(t.utt_b))
        (tgt if t.is_target else non).append(s)
        rows.append((t.utt_a, t.utt_b, s, t.is_target))
    return ScoreSet(np.array(tgt), np.array(non), rows)


def error_rates(scores: ScoreSet):
    """(thresholds, FAR, FRR) over the sorted unique scores plus +inf.

    FAR(t) is the fraction of non-targets scoring >= t, FRR(t) the fraction of
    targets scoring < t.
    """
    scores._validate()
    tgt = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    thresholds = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, far, frr


def _crossing(far, frr) -> float:
    d = far - frr
    # d starts at 1 (accept all) and ends at -1 (reject all), non-increasing
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return far[i]
    alpha = d[i - 1] / (d[i - 1] - d[i])
    return far[i - 1] + alpha * (far[i] - far[i - 1])


def eer(scores: ScoreSet) -> float:
    """Equal error rate in percent, interpolated linearly at the FAR/FRR crossing."""
    _, far, frr = error_rates(scores)
    return float(100.0 * _crossing(far, frr))


def min_dcf(scores: ScoreSet, cfg: DcfConfig = DcfConfig()) -> float:
    """Minimum detection cost over the threshold sweep, normalized by the best trivial system."""
    _, far, frr = error_rates(scores)
    dcf = cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1 - cfg.p_target) * far
    return float(dcf.min() / min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target)))


def det_points(scores: ScoreSet) -> np.ndarray:
    """Raw (threshold, FAR, FRR) rows."""
    return np.column_stack(error_rates(scores))


# --------------------------------------------------------------------------
# language probe


def _stratified_split(labels: np.ndarray, seed: int, test_fraction: float = 0.2):
    rng = stream(seed, "slr-split")
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 10_000):
    """Multinomial logistic regression by full-batch gradient descent.

    ``x`` should already include a bias column. Step size is 1/L for the
    smoothness bound L = 0.5 * lambda_max(X^T X / n) + l2. Stops when the
    gradient norm drops below ``tol`` or after ``max_iter`` iterations.
    Returns (weights (d, C), iterations used).
    """
    n, d = x.shape
    onehot = np.eye(n_classes)[y]
    lip = 0.5 * np.linalg.eigvalsh(x.T @ x / n)[-1] + l2
    step = 1.0 / lip
    w = np.zeros((d, n_classes))
    for it in range(1, max_iter + 1):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = x.T @ (p - onehot) / n + l2 * w
        if np.linalg.norm(grad) < tol:
            break
        w -= step * grad
    return w, it


def _design(x, mean, std):
    z = (x - mean) / std
    return np.hstack([z, np.ones((z.shape[0], 1))])


def slr_probe(embeddings, labels, split_seed: int = 0, max_attempts: int = 10) -> float:
    """Held-out accuracy (%) of a linear language classifier on frozen embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if x.shape[0] < 10 * classes.size:
        raise ValueError(f"slr_probe needs >= {10 * classes.size} embeddings, got {x.shape[0]}")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in y])
    for attempt in range(max_attempts):
        tr, te = _stratified_split(y, split_seed + attempt)
        if np.unique(y[tr]).size == classes.size and np.unique(y[te]).size == classes.size:
            break
    else:
        raise ValueError(f"could not draw a split containing every class in {max_attempts} attempts")
    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std[std < 1e-12] = 1.0
    w, _ = fit_logistic(_design(x[tr], mean, std), y[tr], classes.size)
    pred = np.argmax(_design(x[te], mean, std) @ w, axis=1)
    return 100.0 * float(np.mean(pred == y[te]))


# --------------------------------------------------------------------------
# corpus-level helpers and ablation


def embed_corpus(state: ModelState, corpus: Sequence[Utterance]) -> np.ndarray:
    """Speaker embeddings for the whole corpus, (N, J)."""
    mels = torch.as_tensor(np.stack([u.mel.frames for u in corpus]))
    return infer_speaker_embedding(state, mels).numpy().astype(np.float64)


def cross_lingual_similarity(embeddings: np.ndarray, corpus: Sequence[Utterance]) -> float:
    """Mean cosine similarity over all same-speaker, different-language pairs."""
    e = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    spk = np.array([u.speaker_id for u in corpus])
    lng = np.array([u.language_id for u in corpus])
    mask = (spk[:, None] == spk[None, :]) & (lng[:, None] != lng[None, :])
    mask = np.triu(mask, 1)
    return float((e @ e.T)[mask].mean())


@dataclass
class AblationResult:
    """Rows keyed by variant: {'eer': %, 'min_dcf': ..., 'slr_acc': %}."""

    table: Dict[str, Dict[str, float]]
    states: Dict[str, ModelState] = field(repr=False, default_factory=dict)
    metrics: Dict[str, list] = field(repr=False, default_factory=dict)
    extras: Dict[str, Dict[str, float]] = field(default_factory=dict)

    COLUMNS = ("eer", "min_dcf", "slr_acc")

    def format(self) -> str:
        lines = [f"{'Configuration':<22s} {'EER (%)':>9s} {'minDCF':>8s} {'SLR acc (%)':>12s}"]
        for variant, row in self.table.items():
            lines.append(
                f"{ABLATION_LABELS[variant]:<22s} {row['eer']:9.2f} {row['min_dcf']:8.3f} {row['slr_acc']:12.1f}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("configuration",) + self.COLUMNS)
        for variant, row in self.table.items():
            writer.writerow((variant,) + tuple(repr(row[c]) for c in self.COLUMNS))
        return buf.getvalue()


def run_ablation(
    model_cfg: ModelConfig,
    opt: OptimizerConfig,
    train_corpus: Sequence[Utterance],
    eval_corpus: Sequence[Utterance],
    trials: TrialList,
    seed: int,
    dcf: DcfConfig = DcfConfig(),
    variants: Sequence[str] = ("full", "no_prefix", "speaker_only"),
    probe_seed: int = 0,
) -> AblationResult:
    """Train each variant from the same seed and evaluate it on the same trials."""
    result = AblationResult({})
    lng = np.array([u.language_id for u in eval_corpus])
    for variant in variants:
        cfg = model_cfg.with_variant(variant)
        log.info("ablation: training %s", variant)
        state, rows = train(cfg, opt, train_corpus, seed)
        scores = score_trials(state, eval_corpus, trials)
        emb = embed_corpus(state, eval_corpus)
        result.table[variant] = {
            "eer": eer(scores),
            "min_dcf": min_dcf(scores, dcf),
            "slr_acc": slr_probe(emb, lng, probe_seed),
        }
        result.extras[variant] = {"cross_lingual_cosine": cross_lingual_similarity(emb, eval_corpus)}
        result.states[variant] = state
        result.metrics[variant] = rows
    return result
