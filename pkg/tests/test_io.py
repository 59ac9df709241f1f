import struct
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from laspa.io import (
    FormatError,
    load_checkpoint,
    read_checkpoint,
    read_manifest,
    read_mel,
    read_scores,
    read_trials,
    save_checkpoint,
    write_manifest,
    write_mel,
    write_scores,
    write_trials,
)
from laspa.synthcorpus import CorpusSpec, generate_corpus, make_trials
from laspa.training import OptimizerConfig, init_state, tiny_model_config, train_step


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 30), m=st.integers(1, 12), seed=st.integers(0, 1000))
def test_mel_round_trip(tmp_path_factory, t, m, seed):
    frames = np.random.default_rng(seed).normal(size=(t, m)).astype(np.float32)
    path = tmp_path_factory.mktemp("mel") / "x.lspa"
    write_mel(path, frames)
    assert np.array_equal(read_mel(path).frames, frames)
    assert path.stat().st_size == 16 + 4 * t * m


def test_mel_header_layout(tmp_path):
    path = tmp_path / "x.lspa"
    write_mel(path, np.arange(6, dtype=np.float32).reshape(3, 2))
    raw = path.read_bytes()
    assert raw[:4] == b"LSPA"
    assert struct.unpack("<III", raw[4:16]) == (1, 3, 2)
    assert struct.unpack("<6f", raw[16:]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)


def test_mel_rejects_bad_files(tmp_path):
    path = tmp_path / "x.lspa"
    write_mel(path, np.zeros((2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    (tmp_path / "magic.lspa").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="not an LSPA"):
        read_mel(tmp_path / "magic.lspa")
    raw[4] = 9
    (tmp_path / "ver.lspa").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 9"):
        read_mel(tmp_path / "ver.lspa")
    (tmp_path / "short.lspa").write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="2x2"):
        read_mel(tmp_path / "short.lspa")


@pytest.fixture
def trained_state():
    cfg = tiny_model_config()
    corpus = generate_corpus(CorpusSpec(n_speakers=3, n_languages=2, utts_per_speaker_per_language=2, frames_per_utt=6, n_mels=8))
    state = init_state(cfg, 0)
    state, _, _ = train_step(state, corpus, OptimizerConfig(batch_size=12))
    return cfg, state


def test_checkpoint_round_trip(tmp_path, trained_state):
    cfg, state = trained_state
    path = tmp_path / "c.lspc"
    save_checkpoint(path, state, b"abc")
    loaded = load_checkpoint(path, cfg, expected_digest=b"abc")
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(state, group), getattr(loaded, group)
        assert list(a) == list(b)
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert (loaded.step, loaded.epoch, loaded.rejected_steps) == (1, 0, 0)
    digest, tensors = read_checkpoint(path)
    assert digest == b"abc".ljust(32, b"\0")
    assert "meta/step" in tensors and "param/fusion.pt_spk.p_k" in tensors


def test_checkpoint_bytes_are_deterministic(tmp_path, trained_state):
    _, state = trained_state
    save_checkpoint(tmp_path / "a.lspc", state, b"x")
    save_checkpoint(tmp_path / "b.lspc", state, b"x")
    assert (tmp_path / "a.lspc").read_bytes() == (tmp_path / "b.lspc").read_bytes()


def test_checkpoint_tensor_record_layout(tmp_path, trained_state):
    _, state = trained_state
    path = tmp_path / "c.lspc"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    assert raw[:4] == b"LSPC" and struct.unpack("<I", raw[4:8]) == (1,)
    off = 40
    (n,) = struct.unpack_from("<H", raw, off)
    name = raw[off + 2:off + 2 + n].decode()
    first = next(iter(state.params))
    assert name == f"param/{first}"
    (rank,) = struct.unpack_from("<B", raw, off + 2 + n)
    dims = struct.unpack_from(f"<{rank}I", raw, off + 3 + n)
    assert dims == tuple(state.params[first].shape)


def test_checkpoint_version_and_digest_mismatch(tmp_path, trained_state):
    cfg, state = trained_state
    path = tmp_path / "c.lspc"
    save_checkpoint(path, state, b"one")
    with pytest.raises(FormatError, match="different config"):
        load_checkpoint(path, cfg, expected_digest=b"two")
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "v2.lspc").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 2"):
        load_checkpoint(tmp_path / "v2.lspc", cfg)
    (tmp_path / "cut.lspc").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "cut.lspc", cfg)


def test_checkpoint_rejects_other_architecture(tmp_path, trained_state):
    cfg, state = trained_state
    path = tmp_path / "c.lspc"
    save_checkpoint(path, state)
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(path, replace(cfg, n_speakers=5))
    with pytest.raises(FormatError, match="unexpected tensors"):
        load_checkpoint(path, cfg.with_variant("speaker_only"))


def test_manifest_round_trip_relative_paths(tmp_path):
    corpus = generate_corpus(CorpusSpec(n_speakers=2, n_languages=2, utts_per_speaker_per_language=1, frames_per_utt=5, n_mels=4))
    (tmp_path / "mel").mkdir()
    entries = []
    for u in corpus:
        write_mel(tmp_path / "mel" / f"{u.utt_id}.lspa", u.mel)
        entries.append((u.utt_id, u.speaker_id, u.language_id, f"mel/{u.utt_id}.lspa"))
    write_manifest(tmp_path / "manifest.txt", entries)
    first = (tmp_path / "manifest.txt").read_text().splitlines()[0]
    assert first == f"{corpus[0].utt_id} 0 0 mel/{corpus[0].utt_id}.lspa"
    loaded = read_manifest(tmp_path / "manifest.txt")
    assert [(u.utt_id, u.speaker_id, u.language_id) for u in loaded] == [(u.utt_id, u.speaker_id, u.language_id) for u in corpus]
    assert all(np.array_equal(a.mel.frames, b.mel.frames.astype(np.float32)) for a, b in zip(loaded, corpus))
    (tmp_path / "bad.txt").write_text("a 1 2\n")
    with pytest.raises(FormatError, match="bad.txt:1"):
        read_manifest(tmp_path / "bad.txt")


def test_trials_and_scores_round_trip(tmp_path):
    corpus = generate_corpus(CorpusSpec(n_speakers=3, n_languages=2, utts_per_speaker_per_language=2, frames_per_utt=5, n_mels=4))
    trials = make_trials(corpus, "cross_lingual", 5, 5, seed=0)
    write_trials(tmp_path / "t.txt", trials)
    assert read_trials(tmp_path / "t.txt") == trials
    assert (tmp_path / "t.txt").read_text().splitlines()[0].split()[0] in ("0", "1")
    rows = [(t.utt_a, t.utt_b, 0.1 * i - 0.3, t.is_target) for i, t in enumerate(trials)]
    write_scores(tmp_path / "s.txt", rows)
    assert read_scores(tmp_path / "s.txt") == rows
    a, b, s, tgt = (tmp_path / "s.txt").read_text().splitlines()[0].split()
    assert tgt in ("0", "1") and float(s) == rows[0][2]
    (tmp_path / "bad.txt").write_text("2 a b\n")
    with pytest.raises(FormatError):
        read_trials(tmp_path / "bad.txt")
