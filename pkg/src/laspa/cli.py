"""Command-line entry point: ``laspa <subcommand> [options]``.

Every subcommand that takes ``--config`` prints the config digest and the
trainable-parameter count (with the prefix-token share) to stdout. Logs go
to stderr. Failures print one line ``laspa: error: <kind>: <message>`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .eval import (
    cross_lingual_similarity,
    cosine_score,
    det_points,
    eer,
    embed_corpus,
    min_dcf,
    run_ablation,
    score_trials,
    slr_probe,
)
from .features import mel_spectrogram, read_wav, resample
from .io import (
    FormatError,
    load_checkpoint,
    read_manifest,
    read_mel,
    read_trials,
    write_manifest,
    write_mel,
    write_scores,
    write_trials,
)
from .synthcorpus import generate_corpus, make_trials
from .training import METRICS_HEADER, GradCheckReport, grad_check, infer_speaker_embedding, init_state, tiny_model_config, train

log = logging.getLogger("laspa")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- helpers


@contextlib.contextmanager
def directory_lock(directory: Path):
    """Exclusive lock on ``directory``; a second CLI process fails immediately."""
    directory.mkdir(parents=True, exist_ok=True)
    fh = open(directory / ".laspa.lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise CliError("lock", f"{directory} is in use by another laspa process") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _set_threads():
    raw = os.environ.get("LASPA_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("env", f"LASPA_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG) from None
    torch.set_num_threads(n)


def _out(line: str = ""):
    print(line, flush=True)


def _report_header(cfg: RunConfig):
    state = init_state(cfg.model_config(), cfg.seed)
    total = state.parameter_count()
    prefix = state.prefix_parameter_count()
    _out(f"config_digest {cfg.digest()}")
    _out(f"parameters total={total} prefix={prefix} prefix_fraction={100.0 * prefix / total:.3f}%")
    log.debug("resolved config:\n%s", cfg.dump().rstrip())


def _load(args) -> RunConfig:
    cfg = load_config(args.config, args.set or ())
    _report_header(cfg)
    return cfg


def _corpus_paths(cfg: RunConfig, root=None):
    root = Path(root or cfg.paths.corpus_dir)
    return root / "train" / "manifest.txt", root / "eval" / "manifest.txt", root / "eval" / "trials.txt"


def _need(path: Path, hint: str):
    if not path.exists():
        raise CliError("missing", f"{path} not found ({hint})")
    return path


def _write_corpus(directory: Path, corpus):
    mel_dir = directory / "mel"
    mel_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for u in corpus:
        write_mel(mel_dir / f"{u.utt_id}.lspa", u.mel)
        entries.append((u.utt_id, u.speaker_id, u.language_id, f"mel/{u.utt_id}.lspa"))
    write_manifest(directory / "manifest.txt", entries)


def _truncate_metrics(path: Path, last_step: int):
    """Keep the header and the rows up to ``last_step`` (for resuming)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_step]
    path.write_text("".join(kept))


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(args) -> int:
    cfg = _load(args)
    root = Path(args.out or cfg.paths.corpus_dir)
    train_manifest, eval_manifest, trials_path = _corpus_paths(cfg, root)
    with directory_lock(root):
        train_corpus = generate_corpus(cfg.corpus)
        eval_corpus = generate_corpus(cfg.eval_corpus_spec())
        _write_corpus(train_manifest.parent, train_corpus)
        _write_corpus(eval_manifest.parent, eval_corpus)
        n_tgt, n_non = cfg.trial_counts()
        trials = make_trials(eval_corpus, cfg.eval.trial_kind, n_tgt, n_non, seed=cfg.eval.trial_seed)
        write_trials(trials_path, trials)
    _out(f"train_utterances {len(train_corpus)} -> {train_manifest}")
    _out(f"eval_utterances {len(eval_corpus)} -> {eval_manifest}")
    _out(f"trials {len(trials)} (target={trials.n_target} nontarget={trials.n_nontarget}) -> {trials_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    train_manifest, _, _ = _corpus_paths(cfg)
    corpus = read_manifest(_need(train_manifest, "run gen-corpus first"))
    ckpt_dir = Path(cfg.paths.checkpoint_dir)
    metrics = Path(cfg.paths.metrics_path)
    model_cfg = cfg.model_config()
    with directory_lock(ckpt_dir):
        metrics.parent.mkdir(parents=True, exist_ok=True)
        state = None
        if args.resume:
            state = load_checkpoint(_need(Path(args.resume), "checkpoint to resume"), model_cfg, cfg.model_digest())
            _truncate_metrics(metrics, state.step)
            _out(f"resumed from {args.resume} at epoch {state.epoch} step {state.step}")
        elif metrics.exists():
            metrics.unlink()
        (metrics.parent / "resolved_config.txt").write_text(cfg.dump())
        state, rows = train(
            model_cfg, cfg.optimizer, corpus, cfg.seed, state=state,
            metrics_path=metrics, checkpoint_dir=ckpt_dir, digest=cfg.model_digest(),
        )
    if rows:
        _out("final " + " ".join(f"{k}={v}" for k, v in zip(METRICS_HEADER, rows[-1])))
    _out(f"epochs {state.epoch} steps {state.step} rejected_steps {state.rejected_steps}")
    _out(f"metrics -> {metrics}")
    _out(f"checkpoints -> {ckpt_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    _, eval_manifest, trials_path = _corpus_paths(cfg)
    manifest = _need(Path(args.manifest or eval_manifest), "evaluation manifest")
    trials = read_trials(_need(Path(args.trials or trials_path), "trial list"))
    state = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"), cfg.model_config(), cfg.model_digest())
    corpus = read_manifest(manifest)
    scores = score_trials(state, corpus, trials)
    report_dir = Path(cfg.paths.report_dir)
    score_path = Path(args.scores or report_dir / "scores.txt")
    with directory_lock(score_path.parent):
        write_scores(score_path, scores.rows)
        if args.det:
            np.savetxt(args.det, det_points(scores), fmt="%.17g", header="threshold far frr")
    _out(f"trials {len(trials)} target={len(scores.target_scores)} nontarget={len(scores.nontarget_scores)}")
    _out(f"eer {eer(scores)!r}")
    _out(f"min_dcf {min_dcf(scores, cfg.dcf)!r}")
    emb = embed_corpus(state, corpus)
    languages = np.array([u.language_id for u in corpus])
    if np.unique(languages).size > 1 and len(corpus) >= 10 * np.unique(languages).size:
        _out(f"slr_acc {slr_probe(emb, languages, cfg.eval.probe_seed)!r}")
        _out(f"cross_lingual_cosine {cross_lingual_similarity(emb, corpus)!r}")
    _out(f"scores -> {score_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    train_manifest, eval_manifest, trials_path = _corpus_paths(cfg)
    train_corpus = read_manifest(_need(train_manifest, "run gen-corpus first"))
    eval_corpus = read_manifest(_need(eval_manifest, "run gen-corpus first"))
    trials = read_trials(_need(trials_path, "run gen-corpus first"))
    report_dir = Path(cfg.paths.report_dir)
    with directory_lock(report_dir):
        result = run_ablation(
            cfg.model_config(), cfg.optimizer, train_corpus, eval_corpus, trials,
            seed=cfg.seed, dcf=cfg.dcf, probe_seed=cfg.eval.probe_seed,
        )
        table = result.format()
        (report_dir / "ablation.txt").write_text(table + "\n")
        (report_dir / "ablation.csv").write_text(result.to_csv())
    _out(table)
    for variant, extra in result.extras.items():
        _out(f"cross_lingual_cosine {variant} {extra['cross_lingual_cosine']!r}")
    _out(f"table -> {report_dir / 'ablation.txt'}")
    _out(f"csv -> {report_dir / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    g = cfg.gradcheck
    tiny = replace(tiny_model_config(g.cell), aam_scale=cfg.loss.aam_scale, aam_margin=cfg.loss.aam_margin,
                   loss_weights=(cfg.loss.w_mse, cfg.loss.w_aam, cfg.loss.w_mapc, cfg.loss.w_nll))
    report: GradCheckReport = grad_check(tiny, seed=g.seed, h=g.step, tolerance=g.tolerance)
    for line in report.lines():
        _out(line)
    _out(f"gradcheck {'PASS' if report.passed else 'FAIL'} tensors={len(report.errors)} "
         f"max_rel_err={max(report.errors.values()):.3e}")
    if not report.passed:
        raise CliError("gradcheck", f"{len(report.failures)} tensors above {g.tolerance}: {', '.join(report.failures)}")
    return 0


def _input_mel(path: Path, cfg: RunConfig):
    if path.suffix.lower() == ".wav":
        wave = read_wav(path)
        if wave.sample_rate != cfg.features.sample_rate_hz:
            wave = resample(wave, cfg.features.sample_rate_hz)
        return mel_spectrogram(wave, cfg.features)
    return read_mel(path)


def cmd_embed(args) -> int:
    cfg = _load(args)
    state = load_checkpoint(_need(Path(args.checkpoint), "checkpoint"), cfg.model_config(), cfg.model_digest())
    mel = _input_mel(_need(Path(args.input), "input"), cfg)
    e = infer_speaker_embedding(state, mel)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(" ".join(repr(float(x)) for x in e.values.numpy()) + "\n")
    _out(f"embedding dim={e.values.numel()} -> {out}")
    return 0


def _read_embedding(path: Path) -> np.ndarray:
    try:
        values = np.array([float(x) for x in _need(path, "embedding file").read_text().split()])
    except ValueError:
        raise CliError("format", f"{path}: embedding file must hold whitespace-separated floats") from None
    if values.size == 0:
        raise CliError("format", f"{path}: empty embedding file")
    return values


def cmd_score(args) -> int:
    a, b = _read_embedding(Path(args.a)), _read_embedding(Path(args.b))
    _out(repr(cosine_score(a, b)))
    return 0


def cmd_show_config(args) -> int:
    cfg = load_config(args.config, args.set or ())
    _out(f"# config_digest {cfg.digest()}")
    sys.stdout.write(cfg.dump())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laspa",
        description="Language-agnostic speaker embeddings: synthetic corpus, training, evaluation, ablation.",
        epilog="Environment: LASPA_THREADS caps the number of torch threads.",
    )
    parser.add_argument("--version", action="version", version=f"laspa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", metavar="PATH", help="run config file (defaults used when omitted)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key, e.g. optimizer.epochs=5 (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write the synthetic train/eval corpora, manifests and trial list")
    p.add_argument("--out", metavar="DIR", help="output directory (default: paths.corpus_dir)")

    p = add("train", cmd_train, "train the full model; writes checkpoints and the metrics CSV")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from this checkpoint")

    p = add("evaluate", cmd_evaluate, "score a trial list with a checkpoint; prints EER/minDCF, writes a score file")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint (.lspc)")
    p.add_argument("--trials", metavar="PATH", help="trial list (default: <corpus_dir>/eval/trials.txt)")
    p.add_argument("--manifest", metavar="PATH", help="corpus manifest (default: <corpus_dir>/eval/manifest.txt)")
    p.add_argument("--scores", metavar="PATH", help="score file (default: <report_dir>/scores.txt)")
    p.add_argument("--det", metavar="PATH", help="also dump raw (threshold, FAR, FRR) points")

    add("ablate", cmd_ablate, "train and evaluate Full / No-Prefix / Speaker-only; writes table and CSV")
    add("gradcheck", cmd_gradcheck, "finite-difference check of every trainable tensor on a tiny model")

    p = add("embed", cmd_embed, "speaker embedding of one .wav or .lspa file, written as text")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint (.lspc)")
    p.add_argument("--input", required=True, metavar="PATH", help=".wav (PCM16 or float32) or .lspa mel file")
    p.add_argument("--out", required=True, metavar="PATH", help="output embedding file")

    p = add("score", cmd_score, "cosine score between two embedding files", config=False)
    p.add_argument("a", metavar="EMBEDDING_A")
    p.add_argument("b", metavar="EMBEDDING_B")

    add("show-config", cmd_show_config, "print the fully resolved config, every default included")
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        _set_threads()
        return args.func(args)
    except CliError as exc:
        kind, message, code = exc.kind, str(exc), exc.code
    except ConfigError as exc:
        kind, message, code = "config", str(exc), EXIT_CONFIG
    except FormatError as exc:
        kind, message, code = "format", str(exc), EXIT_RUNTIME
    except (OSError, ValueError, KeyError) as exc:
        kind, message, code = type(exc).__name__, str(exc), EXIT_RUNTIME
    print(f"laspa: error: {kind}: {_one_line(message)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
