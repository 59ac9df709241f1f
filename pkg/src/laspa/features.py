"""Waveform front-end: resampling and log-mel spectrograms.

Framing is "valid" only (no centering, no padding), so a signal of ``N``
samples with window ``W`` and hop ``H`` yields ``floor((N - W) / H) + 1``
frames. No pre-emphasis and no mean normalization are applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import signal

__all__ = [
    "Waveform",
    "FeatureConfig",
    "MelSpectrogram",
    "resample",
    "mel_spectrogram",
    "mel_filterbank",
    "hz_to_mel",
    "mel_to_hz",
    "n_frames",
    "read_wav",
]


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples))
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    fft_size: int = 512
    fmin_hz: float = 20.0
    fmax_hz: float = 7600.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ValueError("need window_ms > hop_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.fft_size < self.window_samples:
            raise ValueError(
                f"fft_size {self.fft_size} is shorter than the window ({self.window_samples} samples)"
            )
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))


@dataclass(frozen=True)
class MelSpectrogram:
    """T x M log-mel matrix. ``config`` is None for synthesized features."""

    frames: np.ndarray
    config: Optional[FeatureConfig] = field(default=None, compare=False)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise ValueError(f"mel frames must be T x M, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def n_frames(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise ValueError(f"signal of {n_samples} samples is shorter than one window ({window})")
    return (n_samples - window) // hop + 1


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited resampling with a Kaiser-windowed sinc polyphase filter."""
    if len(wave.samples) == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return wave
    ratio = Fraction(target_rate, wave.sample_rate)
    out = signal.resample_poly(
        np.asarray(wave.samples, dtype=np.float64), ratio.numerator, ratio.denominator
    )
    return Waveform(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, fft_size // 2 + 1), peak height 1."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(wave: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    if wave.sample_rate != cfg.sample_rate_hz:
        raise ValueError(
            f"waveform is at {wave.sample_rate} Hz but config expects {cfg.sample_rate_hz} Hz; resample first"
        )
    x = np.asarray(wave.samples, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("waveform contains NaN")
    win, hop = cfg.window_samples, cfg.hop_samples
    t = n_frames(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:t]
    window = signal.get_window("hamming", win, fftbins=True)
    power = np.abs(np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)) ** 2
    energy = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(energy, cfg.log_floor)), cfg)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAV file."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))
