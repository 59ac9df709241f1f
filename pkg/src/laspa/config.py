"""Run configuration: one flat ``section.key = value`` text file per run.

Example::

    seed = 0
    corpus.n_speakers = 20
    optimizer.learning_rate = 0.001
    encoder.channels = 16, 32

Blank lines and ``#`` comments are ignored. Every key must be known; an
unknown key is an error that names it. Values are parsed by the type of the
field's default. A handful of dimensions are not keys because they are tied
to others (``encoder.n_mels``, ``decoder.n_mels`` follow ``corpus.n_mels``;
``attention.d_model`` and ``decoder.embed_dim`` follow
``encoder.embed_dim``). The resolved dump lists them as comments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .decoder import DecoderConfig
from .encoders import EncoderConfig
from .eval import DcfConfig
from .features import FeatureConfig
from .fusion import AttentionConfig
from .synthcorpus import CorpusSpec
from .training import ModelConfig, OptimizerConfig

__all__ = ["ConfigError", "EvalConfig", "GradCheckConfig", "PathsConfig", "LossConfig", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration."""


@dataclass(frozen=True)
class LossConfig:
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    w_mse: float = 1.0
    w_aam: float = 1.0
    w_mapc: float = 1.0
    w_nll: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    trial_kind: str = "cross_lingual"
    # 0 takes every available pair
    n_target: int = 0
    n_nontarget: int = 0
    trial_seed: int = 1
    probe_seed: int = 0
    # speakers in the evaluation corpus, drawn after the training speakers
    eval_speakers: int = 20

    def __post_init__(self):
        if self.trial_kind not in ("cross_lingual", "monolingual"):
            raise ValueError(f"eval.trial_kind must be cross_lingual or monolingual, got {self.trial_kind!r}")
        if self.n_target < 0 or self.n_nontarget < 0:
            raise ValueError("trial counts must be >= 0")
        if self.eval_speakers < 2:
            raise ValueError("eval.eval_speakers must be >= 2")


@dataclass(frozen=True)
class GradCheckConfig:
    cell: str = "lstm"
    seed: int = 0
    step: float = 1e-5
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.cell not in ("lstm", "gru"):
            raise ValueError(f"gradcheck.cell must be lstm or gru, got {self.cell!r}")


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "runs/checkpoints"
    metrics_path: str = "runs/metrics.csv"
    report_dir: str = "runs"


# keys that follow another key instead of being set on their own
_TIED = {
    "corpus": (),
    "encoder": ("n_mels",),
    "attention": ("d_model",),
    "decoder": ("embed_dim", "n_mels"),
}

_SECTIONS = {
    "features": FeatureConfig,
    "corpus": CorpusSpec,
    "encoder": EncoderConfig,
    "attention": AttentionConfig,
    "decoder": DecoderConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "dcf": DcfConfig,
    "eval": EvalConfig,
    "gradcheck": GradCheckConfig,
    "paths": PathsConfig,
}

# speaker_offset is how the evaluation corpus is drawn, never a user setting
_HIDDEN = {("corpus", "speaker_offset")}

# sections that fix the shapes and meaning of the checkpointed tensors
_MODEL_SECTIONS = ("encoder", "attention", "decoder", "loss")
_MODEL_CORPUS_KEYS = ("corpus.n_speakers", "corpus.n_languages", "corpus.n_mels")


def _keys(section: str) -> List[str]:
    skip = set(_TIED.get(section, ()))
    return [
        f.name for f in fields(_SECTIONS[section]) if f.name not in skip and (section, f.name) not in _HIDDEN
    ]


def _parse_value(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    features: FeatureConfig = FeatureConfig()
    corpus: CorpusSpec = CorpusSpec()
    encoder: EncoderConfig = EncoderConfig()
    attention: AttentionConfig = AttentionConfig()
    decoder: DecoderConfig = DecoderConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    dcf: DcfConfig = DcfConfig()
    eval: EvalConfig = EvalConfig()
    gradcheck: GradCheckConfig = GradCheckConfig()
    paths: PathsConfig = PathsConfig()

    def __post_init__(self):
        if self.features.n_mels != self.corpus.n_mels:
            raise ConfigError(
                f"features.n_mels ({self.features.n_mels}) must equal corpus.n_mels ({self.corpus.n_mels})"
            )
        # tie the derived dimensions
        j, m = self.encoder.embed_dim, self.corpus.n_mels
        if self.encoder.embed_dim % self.attention.n_heads:
            raise ConfigError(
                f"encoder.embed_dim ({j}) must be divisible by attention.n_heads ({self.attention.n_heads})"
            )
        object.__setattr__(self, "encoder", replace(self.encoder, n_mels=m))
        object.__setattr__(self, "attention", replace(self.attention, d_model=j))
        object.__setattr__(self, "decoder", replace(self.decoder, embed_dim=j, n_mels=m))

    # ---------------------------------------------------------------- views

    def model_config(self, variant: str = "full") -> ModelConfig:
        cfg = ModelConfig(
            encoder=self.encoder,
            attention=self.attention,
            decoder=self.decoder,
            n_speakers=self.corpus.n_speakers,
            n_languages=self.corpus.n_languages,
            aam_scale=self.loss.aam_scale,
            aam_margin=self.loss.aam_margin,
            loss_weights=(self.loss.w_mse, self.loss.w_aam, self.loss.w_mapc, self.loss.w_nll),
        )
        return cfg.with_variant(variant)

    def eval_corpus_spec(self) -> CorpusSpec:
        """Held-out speakers from the same generator (same seed, same language bank)."""
        return replace(self.corpus, n_speakers=self.eval.eval_speakers, speaker_offset=self.corpus.n_speakers)

    def trial_counts(self) -> Tuple[Optional[int], Optional[int]]:
        return (self.eval.n_target or None, self.eval.n_nontarget or None)

    # ---------------------------------------------------------------- text

    def items(self) -> List[Tuple[str, object]]:
        out: List[Tuple[str, object]] = [("seed", self.seed)]
        for section in _SECTIONS:
            obj = getattr(self, section)
            out.extend((f"{section}.{k}", getattr(obj, k)) for k in _keys(section))
        return out

    def dump(self) -> str:
        lines = [f"{k} = {_format_value(v)}" for k, v in self.items()]
        lines.append(f"# encoder.n_mels = decoder.n_mels = corpus.n_mels = {self.corpus.n_mels}")
        lines.append(f"# attention.d_model = decoder.embed_dim = encoder.embed_dim = {self.encoder.embed_dim}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """sha256 over every resolved key except the ``paths`` section."""
        text = "\n".join(f"{k} = {_format_value(v)}" for k, v in self.items() if not k.startswith("paths."))
        return hashlib.sha256(text.encode()).hexdigest()

    def model_digest(self) -> bytes:
        """sha256 over the keys that define the model; stored in checkpoints."""
        text = "\n".join(
            f"{k} = {_format_value(v)}"
            for k, v in self.items()
            if k.split(".")[0] in _MODEL_SECTIONS or k in _MODEL_CORPUS_KEYS
        )
        return hashlib.sha256(text.encode()).digest()


def _build(values: Dict[str, Dict[str, object]], seed: int) -> RunConfig:
    kwargs = {}
    j = values.get("encoder", {}).get("embed_dim", EncoderConfig.embed_dim)
    m = values.get("corpus", {}).get("n_mels", CorpusSpec.n_mels)
    values.setdefault("encoder", {})["n_mels"] = m
    values.setdefault("attention", {})["d_model"] = j
    values.setdefault("decoder", {}).update(embed_dim=j, n_mels=m)
    for section, cls in _SECTIONS.items():
        try:
            kwargs[section] = cls(**values.get(section, {}))
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        return RunConfig(seed=seed, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str = "", overrides: Iterable[str] = (), source: str = "<config>") -> RunConfig:
    """Parse config text, then apply ``key=value`` overrides in order."""
    known = {"seed": 0}
    for section, cls in _SECTIONS.items():
        defaults = cls()
        for k in _keys(section):
            known[f"{section}.{k}"] = getattr(defaults, k)

    assignments: List[Tuple[str, str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        assignments.append((key, raw, f"{source}:{lineno}"))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        assignments.append((key, raw, "override"))

    values: Dict[str, Dict[str, object]] = {}
    seed = 0
    for key, raw, where in assignments:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}' ({where})")
        value = _parse_value(key, raw, known[key])
        if key == "seed":
            seed = value
        else:
            section, name = key.split(".", 1)
            values.setdefault(section, {})[name] = value
    return _build(values, seed)


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides, source=str(path))
