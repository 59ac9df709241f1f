"""On-disk formats.

Mel container (``.lspa``)::

    b"LSPA" | version u32 | T u32 | M u32 | T*M float32, row-major

Checkpoint (``.lspc``)::

    b"LSPC" | version u32 | config digest (32 bytes, sha256)
    repeated until EOF:
        name_len u16 | name (utf-8) | rank u8 | dims u32 * rank | float32 data

Every integer and float is little-endian. Checkpoint tensors are named
``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` and ``meta/<field>``.

Text formats: corpus manifest ``<utt_id> <speaker_id> <language_id> <path>``,
trial list ``<0|1> <utt_a> <utt_b>``, score file
``<utt_a> <utt_b> <score> <0|1>``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch

from .features import MelSpectrogram
from .synthcorpus import Trial, TrialList, Utterance

__all__ = [
    "MEL_MAGIC",
    "CKPT_MAGIC",
    "FORMAT_VERSION",
    "FormatError",
    "write_mel",
    "read_mel",
    "save_checkpoint",
    "load_checkpoint",
    "write_manifest",
    "read_manifest",
    "write_trials",
    "read_trials",
    "write_scores",
    "read_scores",
]

MEL_MAGIC = b"LSPA"
CKPT_MAGIC = b"LSPC"
FORMAT_VERSION = 1
DIGEST_BYTES = 32


class FormatError(ValueError):
    """A file does not follow the expected layout or version."""


def write_mel(path, mel) -> None:
    frames = np.ascontiguousarray(getattr(mel, "frames", mel), dtype="<f4")
    t, m = frames.shape
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC + struct.pack("<III", FORMAT_VERSION, t, m))
        fh.write(frames.tobytes())


def read_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MEL_MAGIC:
        raise FormatError(f"{path}: not an LSPA mel file")
    version, t, m = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported mel format version {version}")
    if len(raw) != 16 + 4 * t * m:
        raise FormatError(f"{path}: expected {t}x{m} floats, file size is {len(raw)} bytes")
    frames = np.frombuffer(raw, dtype="<f4", offset=16).reshape(t, m).astype(np.float32)
    return MelSpectrogram(frames)


def _write_tensor(fh, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<H", len(encoded)) + encoded)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.tobytes())


def _read_tensors(raw: bytes, offset: int, path) -> Dict[str, np.ndarray]:
    out = {}
    try:
        while offset < len(raw):
            (n,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + n].decode("utf-8")
            offset += n
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if offset + 4 * count > len(raw):
                raise FormatError(f"{path}: tensor {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
            offset += 4 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    return out


def save_checkpoint(path, state, digest: bytes = b"") -> None:
    digest = digest.ljust(DIGEST_BYTES, b"\0")[:DIGEST_BYTES]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", FORMAT_VERSION) + digest)
        for group, tensors in (("param", state.params), ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
            for name, value in tensors.items():
                _write_tensor(fh, f"{group}/{name}", value.detach().cpu().numpy())
        # the shuffling stream is a pure function of (seed, epoch), so epoch is the rng state
        for name in ("step", "epoch", "rejected_steps"):
            _write_tensor(fh, f"meta/{name}", np.array([getattr(state, name)]))
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[bytes, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an LSPC checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} does not match supported version {FORMAT_VERSION}")
    digest = raw[8:8 + DIGEST_BYTES]
    return digest, _read_tensors(raw, 8 + DIGEST_BYTES, path)


def load_checkpoint(path, model_cfg, expected_digest: bytes | None = None):
    """Rebuild a float32 ModelState from ``path``."""
    from .training import init_state

    digest, tensors = read_checkpoint(path)
    if expected_digest is not None and digest != expected_digest.ljust(DIGEST_BYTES, b"\0")[:DIGEST_BYTES]:
        raise FormatError(f"{path}: checkpoint was written for a different config (digest {digest.hex()[:16]})")
    state = init_state(model_cfg, seed=0)
    for group, target in (("param", state.params), ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for name, ref in target.items():
            key = f"{group}/{name}"
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor {key!r}")
            if tuple(tensors[key].shape) != tuple(ref.shape):
                raise FormatError(f"{path}: tensor {key!r} has shape {tensors[key].shape}, expected {tuple(ref.shape)}")
            target[name] = torch.from_numpy(tensors[key])
    extra = {k for k in tensors if not k.startswith("meta/")} - {
        f"{g}/{n}" for g in ("param", "adam_m", "adam_v") for n in state.params
    }
    if extra:
        raise FormatError(f"{path}: unexpected tensors {sorted(extra)[:3]}")
    for name in ("step", "epoch", "rejected_steps"):
        setattr(state, name, int(tensors[f"meta/{name}"][0]))
    return state


def write_manifest(path, entries: Iterable[Tuple[str, int, int, str]]) -> None:
    with open(path, "w") as fh:
        for utt_id, spk, lng, mel_path in entries:
            fh.write(f"{utt_id} {spk} {lng} {mel_path}\n")


def read_manifest(path) -> List[Utterance]:
    """Load every utterance listed in a manifest; relative paths resolve against it."""
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        utt_id, spk, lng, mel_path = parts
        mel_file = Path(mel_path)
        if not mel_file.is_absolute():
            mel_file = base / mel_file
        out.append(Utterance(utt_id, read_mel(mel_file), int(spk), int(lng)))
    return out


def write_trials(path, trials: TrialList) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{int(t.is_target)} {t.utt_a} {t.utt_b}\n")


def read_trials(path) -> TrialList:
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected '<0|1> <utt_a> <utt_b>'")
        trials.append(Trial(parts[0] == "1", parts[1], parts[2]))
    return TrialList(tuple(trials))


def write_scores(path, rows: Sequence[Tuple[str, str, float, bool]]) -> None:
    with open(path, "w") as fh:
        for a, b, score, is_target in rows:
            fh.write(f"{a} {b} {score!r} {int(is_target)}\n")


def read_scores(path) -> List[Tuple[str, str, float, bool]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected '<utt_a> <utt_b> <score> <0|1>'")
        rows.append((parts[0], parts[1], float(parts[2]), parts[3] == "1"))
    return rows
