"""Audio representation, WAV I/O, framing and spectral primitives.

Samples are float64 in [-1, 1]. The transform used everywhere is the unitary
DFT (1/sqrt(L) scaling), so Parseval holds without extra factors.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSD_FLOOR = 1e-12
INT16_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Raised for WAV files this package cannot read (not 16-bit mono PCM)."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(s)) or np.any(np.abs(s) > 1.0):
            raise ValueError("samples must be finite and lie in [-1, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int = 512
    hop: int | None = None
    window: str = "rectangular"

    def __post_init__(self):
        L = self.frame_len
        if L < 2 or L & (L - 1):
            raise ValueError(f"frame_len must be a power of two, got {L}")
        hop = L if self.hop is None else self.hop
        if not 1 <= hop <= L:
            raise ValueError(f"hop must lie in [1, {L}], got {hop}")
        object.__setattr__(self, "hop", int(hop))
        if self.window not in ("rectangular", "hann"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def window_array(self) -> np.ndarray:
        return window_function(self.window, self.frame_len)

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop)


@dataclass(frozen=True)
class FrameSet:
    frames: np.ndarray
    config: FrameConfig
    origin_offsets: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Spectrum:
    bins: np.ndarray
    psd_db: np.ndarray

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.bins) ** 2


def window_function(name: str, length: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(length)
    if name == "hann":
        # symmetric Hann: both endpoints are exactly zero
        return np.hanning(length)
    raise ValueError(f"unknown window {name!r}")


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into a normalized waveform."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise AudioFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: expected 16-bit samples")
            if f.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV not supported")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"{path}: {e or 'truncated file'}") from e
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / INT16_SCALE
    return Waveform(data, rate)


def to_int16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(clipped * INT16_SCALE), -32768, 32767).astype("<i2")


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit PCM mono; samples are clamped then rounded."""
    with open(path, "wb") as raw, wave.open(raw, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate_hz))
        f.writeframes(to_int16(w.samples).tobytes())


def segment(w, cfg: FrameConfig) -> FrameSet:
    """Split into ``ceil(len/hop)`` windowed frames, zero-padding past the end."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    L, hop = cfg.frame_len, cfg.hop
    n = cfg.n_frames(x.size)
    offsets = np.arange(n) * hop
    padded = np.zeros(offsets[-1] + L)
    padded[: x.size] = x
    idx = offsets[:, None] + np.arange(L)[None, :]
    frames = padded[idx] * cfg.window_array()[None, :]
    return FrameSet(frames, cfg, offsets)


def overlap_add(frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Scatter-add frame rows back to sample positions (adjoint of framing)."""
    n, L = frames.shape
    out = np.zeros((n - 1) * hop + L)
    if hop == L:
        out[:] = frames.reshape(-1)
    else:
        for i in range(n):
            out[i * hop : i * hop + L] += frames[i]
    return out[:n_samples]


def spectrum(frames: FrameSet) -> Spectrum:
    L = frames.config.frame_len
    X = np.fft.rfft(frames.frames, axis=-1) / math.sqrt(L)
    return Spectrum(X, 10.0 * np.log10(np.abs(X) ** 2 + PSD_FLOOR))


def bin_frequencies(cfg: FrameConfig, sample_rate_hz: int) -> np.ndarray:
    return np.arange(cfg.n_bins) * sample_rate_hz / cfg.frame_len


def snr_db(x, delta) -> float:
    xs = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    ds = delta.samples if isinstance(delta, Waveform) else np.asarray(delta, dtype=np.float64)
    if xs.shape != ds.shape:
        raise ValueError(f"length mismatch: {xs.size} vs {ds.size}")
    noise = float(np.sum(ds**2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(xs**2)) / noise)


def write_matrix_csv(path, header_hz: np.ndarray, rows: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f)
        out.writerow([f"{h:g}" for h in header_hz])
        for r in rows:
            out.writerow([f"{v:.6g}" for v in r])


def export_spectrogram_csv(w: Waveform, cfg: FrameConfig, path) -> None:
    spec = spectrum(segment(w, cfg))
    write_matrix_csv(path, bin_frequencies(cfg, w.sample_rate_hz), spec.psd_db)
