"""Synthetic multi-speaker, multi-language log-mel corpus.

Each frame is ``x_t = A_s * g_l(t) + b_s + eps_t``:

* ``A_s`` (diagonal gains in [0.5, 1.5]) and ``b_s`` (bias vector) are fixed
  per speaker and act as a static spectral envelope;
* ``g_l(t)`` walks cyclically through a language-specific sequence of
  "phoneme" prototypes drawn from a bank of 5, with cycle length ``3 + 2l``
  and a random phase per utterance;
* ``eps_t`` is white Gaussian noise.

Speaker and language parameters come from separate named random streams, so
the two factors are independent by construction. Every speaker speaks every
language, giving a balanced design.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, List, Literal, NamedTuple, Optional, Sequence

import numpy as np

from .features import MelSpectrogram
from .rng import stream

__all__ = [
    "CorpusSpec",
    "Utterance",
    "Trial",
    "TrialList",
    "generate_corpus",
    "language_trajectory",
    "make_trials",
    "PROTOTYPES_PER_LANGUAGE",
]

PROTOTYPES_PER_LANGUAGE = 5


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 20
    n_languages: int = 3
    utts_per_speaker_per_language: int = 10
    frames_per_utt: int = 100
    n_mels: int = 40
    noise_std: float = 0.05
    seed: int = 0
    # generator scales; not part of the minimal contract but recorded for reproducibility
    speaker_bias_std: float = 1.0
    prototype_std: float = 1.0
    # global index of the first speaker, so that held-out speakers can be drawn
    # from the same generative model without colliding with training speakers
    speaker_offset: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")
        if self.n_languages < 2:
            raise ValueError("n_languages must be >= 2")
        for name in ("utts_per_speaker_per_language", "frames_per_utt", "n_mels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.speaker_offset < 0:
            raise ValueError("speaker_offset must be >= 0")

    @property
    def n_utterances(self) -> int:
        return self.n_speakers * self.n_languages * self.utts_per_speaker_per_language


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    mel: MelSpectrogram
    speaker_id: int
    language_id: int


class Trial(NamedTuple):
    is_target: bool
    utt_a: str
    utt_b: str


@dataclass(frozen=True)
class TrialList:
    trials: tuple

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(Trial(bool(t[0]), t[1], t[2]) for t in self.trials))

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target

    def utterance_ids(self) -> List[str]:
        seen = dict.fromkeys(u for t in self.trials for u in (t.utt_a, t.utt_b))
        return list(seen)


def _speaker_params(spec: CorpusSpec, global_speaker: int):
    rng = stream(spec.seed, "speaker", global_speaker)
    gain = rng.uniform(0.5, 1.5, size=spec.n_mels)
    bias = rng.normal(0.0, spec.speaker_bias_std, size=spec.n_mels)
    return gain, bias


def _language_params(spec: CorpusSpec, language: int):
    rng = stream(spec.seed, "language", language)
    bank = rng.normal(0.0, spec.prototype_std, size=(PROTOTYPES_PER_LANGUAGE, spec.n_mels))
    cycle = 3 + 2 * language
    order = rng.permutation(PROTOTYPES_PER_LANGUAGE)
    sequence = order[np.arange(cycle) % PROTOTYPES_PER_LANGUAGE]
    return bank, sequence


def language_trajectory(spec: CorpusSpec, language: int, n_frames: int, phase: int = 0) -> np.ndarray:
    """g_l(t) for t = 0..n_frames-1, shape (n_frames, n_mels)."""
    bank, sequence = _language_params(spec, language)
    idx = sequence[(np.arange(n_frames) + phase) % len(sequence)]
    return bank[idx]


def _utterance(spec: CorpusSpec, s: int, l: int, u: int, gain, bias) -> Utterance:
    g = spec.speaker_offset + s
    rng = stream(spec.seed, "utterance", g, l, u)
    phase = int(rng.integers(0, 3 + 2 * l))
    traj = language_trajectory(spec, l, spec.frames_per_utt, phase)
    noise = rng.normal(0.0, 1.0, size=traj.shape) * spec.noise_std
    frames = (traj * gain + bias + noise).astype(np.float32)
    return Utterance(f"s{g:04d}-l{l:02d}-u{u:03d}", MelSpectrogram(frames), s, l)


def generate_corpus(spec: CorpusSpec) -> List[Utterance]:
    """Ordered by speaker, then language, then utterance index."""
    out = []
    for s in range(spec.n_speakers):
        gain, bias = _speaker_params(spec, spec.speaker_offset + s)
        for l in range(spec.n_languages):
            for u in range(spec.utts_per_speaker_per_language):
                out.append(_utterance(spec, s, l, u, gain, bias))
    return out


def _candidate_pairs(corpus: Sequence[Utterance], kind: str):
    targets, nontargets = [], []
    for i, j in combinations(range(len(corpus)), 2):
        a, b = corpus[i], corpus[j]
        same_spk = a.speaker_id == b.speaker_id
        same_lng = a.language_id == b.language_id
        if kind == "cross_lingual":
            if same_spk and not same_lng:
                targets.append((i, j))
            elif not same_spk:
                nontargets.append((i, j))
        else:
            if not same_lng:
                continue
            (targets if same_spk else nontargets).append((i, j))
    return targets, nontargets


def make_trials(
    corpus: Sequence[Utterance],
    kind: Literal["monolingual", "cross_lingual"],
    n_target: Optional[int],
    n_nontarget: Optional[int],
    seed: int = 0,
) -> TrialList:
    """Sample verification trials without replacement.

    Cross-lingual targets pair one speaker's utterances in two different
    languages; non-targets pair different speakers in any languages.
    Monolingual trials keep both sides in one language. ``None`` for a count
    takes every available pair.
    """
    if kind not in ("monolingual", "cross_lingual"):
        raise ValueError(f"unknown trial kind {kind!r}")
    if len({u.speaker_id for u in corpus}) < 2:
        raise ValueError("trials need at least 2 speakers")
    targets, nontargets = _candidate_pairs(corpus, kind)
    rng = stream(seed, f"trials-{kind}")
    picked = []
    for label, pool, n in ((True, targets, n_target), (False, nontargets, n_nontarget)):
        n = len(pool) if n is None else n
        if n > len(pool):
            side = "target" if label else "non-target"
            raise ValueError(f"requested {n} {side} {kind} trials but only {len(pool)} distinct pairs exist")
        for k in rng.choice(len(pool), size=n, replace=False):
            i, j = pool[k]
            picked.append(Trial(label, corpus[i].utt_id, corpus[j].utt_id))
    return TrialList(tuple(picked))


def label_matrix(corpus: Iterable[Utterance]):
    """(speaker_ids, language_ids) as int arrays."""
    corpus = list(corpus)
    return (
        np.array([u.speaker_id for u in corpus], dtype=np.int64),
        np.array([u.language_id for u in corpus], dtype=np.int64),
    )
