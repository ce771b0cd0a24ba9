"""Shoebox room impulse responses (image-source method) and their application.

``apply_room`` is convolution, an optional 100-7500 Hz band-pass and a peak
renormalization. The linear part has an exact adjoint (``adjoint_apply``);
``room_vjp`` chains that with the derivative of the renormalization so
attack gradients can flow back through a simulated room.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .audio import Waveform, save_wav

SPEED_OF_SOUND = 343.0
BANDPASS_HZ = (100.0, 7500.0)
BANDPASS_TAPS = 513

BANK_MAGIC = b"PATROOM\x01"
BANK_VERSION = 1


class RoomBankFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple
    reflection: tuple
    source: tuple
    mic: tuple
    max_order: int = 3
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate_hz: int = 16000

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        refl = self.reflection
        if np.isscalar(refl):
            refl = (refl,) * 6
        refl = tuple(float(r) for r in refl)
        src = tuple(float(v) for v in self.source)
        mic = tuple(float(v) for v in self.mic)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {dims}")
        if len(refl) != 6 or not all(0.0 <= r < 1.0 for r in refl):
            raise ValueError("need six reflection coefficients in [0, 1)")
        for name, p in (("source", src), ("mic", mic)):
            if len(p) != 3 or not all(0.0 < v < d for v, d in zip(p, dims)):
                raise ValueError(f"{name} {p} is not strictly inside the room {dims}")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "reflection", refl)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "mic", mic)

    def as_array(self) -> np.ndarray:
        return np.array([*self.dims, *self.reflection, *self.source, *self.mic,
                         self.max_order, self.speed_of_sound, self.sample_rate_hz], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RoomSpec":
        a = [float(v) for v in a]
        return cls(tuple(a[0:3]), tuple(a[3:9]), tuple(a[9:12]), tuple(a[12:15]),
                   int(a[15]), a[16], int(a[17]))


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    delay: int = 0
    spec: RoomSpec | None = None

    @classmethod
    def identity(cls) -> "Rir":
        return cls(np.array([1.0]), 0, None)

    @property
    def is_identity(self) -> bool:
        return self.taps.size == 1 and self.taps[0] == 1.0


def _axis_images(src: float, length: float, i: int):
    """Coordinate of the ``i``-th image along one axis and its (near, far) wall hits."""
    pos = i * length + (src if i % 2 == 0 else length - src)
    n = abs(i)
    if i >= 0:
        return pos, n // 2, (n + 1) // 2
    return pos, (n + 1) // 2, n // 2


def image_sources(spec: RoomSpec):
    """Yield ``(position, amplitude_gain, order)`` for every image up to max order."""
    R = spec.max_order
    beta = spec.reflection
    for i, j, k in itertools.product(range(-R, R + 1), repeat=3):
        order = abs(i) + abs(j) + abs(k)
        if order > R:
            continue
        px, nx0, nx1 = _axis_images(spec.source[0], spec.dims[0], i)
        py, ny0, ny1 = _axis_images(spec.source[1], spec.dims[1], j)
        pz, nz0, nz1 = _axis_images(spec.source[2], spec.dims[2], k)
        gain = (beta[0] ** nx0 * beta[1] ** nx1 * beta[2] ** ny0 *
                beta[3] ** ny1 * beta[4] ** nz0 * beta[5] ** nz1)
        yield np.array([px, py, pz]), gain, order


def image_source_rir(spec: RoomSpec, fractional: bool = False, sinc_half_width: int = 16) -> Rir:
    """Sum of attenuated, delayed impulses from every image source.

    Delays are rounded to the nearest sample unless ``fractional`` is set,
    in which case each impulse becomes a Hann-windowed sinc.
    """
    fs, c = spec.sample_rate_hz, spec.speed_of_sound
    mic = np.array(spec.mic)
    arrivals = []
    for pos, gain, _ in image_sources(spec):
        d = float(np.linalg.norm(pos - mic))
        if gain == 0.0:
            continue
        arrivals.append((d / c * fs, gain / (4.0 * math.pi * d)))
    direct = float(np.linalg.norm(np.array(spec.source) - mic)) / c * fs
    last = max(t for t, _ in arrivals)
    pad = sinc_half_width if fractional else 0
    taps = np.zeros(int(math.ceil(last)) + pad + 1)
    for t, a in arrivals:
        if fractional:
            n0 = int(math.floor(t))
            n = np.arange(max(n0 - sinc_half_width + 1, 0), n0 + sinc_half_width + 1)
            win = 0.5 * (1.0 + np.cos(np.pi * (n - t) / sinc_half_width))
            taps[n] += a * np.sinc(n - t) * win
        else:
            taps[int(round(t))] += a
    return Rir(taps, int(round(direct)), spec)


@dataclass(frozen=True)
class RoomRanges:
    dims_m: tuple = (3.0, 10.0)
    reflection: tuple = (0.2, 0.8)
    max_order: int = 3
    clearance_m: float = 0.5
    sample_rate_hz: int = 16000


def sample_room_specs(n: int, ranges: RoomRanges = RoomRanges(), seed: int = 0) -> list[RoomSpec]:
    if n < 1:
        raise ValueError("need at least one room")
    lo, hi = ranges.dims_m
    if not 0 < lo <= hi or hi <= 2 * ranges.clearance_m:
        raise ValueError("degenerate room dimension range")
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        dims = rng.uniform(lo, hi, 3)
        refl = rng.uniform(*ranges.reflection, 6)
        inner = lambda: rng.uniform(ranges.clearance_m, dims - ranges.clearance_m)
        src, mic = inner(), inner()
        specs.append(RoomSpec(tuple(dims), tuple(refl), tuple(src), tuple(mic),
                              ranges.max_order, SPEED_OF_SOUND, ranges.sample_rate_hz))
    return specs


def sample_room_bank(n: int, ranges: RoomRanges = RoomRanges(), seed: int = 0) -> list[Rir]:
    """``n`` seeded rooms drawn uniformly from ``ranges``; deterministic per seed."""
    return [image_source_rir(s) for s in sample_room_specs(n, ranges, seed)]


def design_bandpass(sample_rate_hz: int = 16000, band_hz=BANDPASS_HZ, n_taps: int = BANDPASS_TAPS) -> np.ndarray:
    """Linear-phase Hamming-windowed sinc band-pass, unit gain mid-band."""
    if n_taps % 2 == 0:
        raise ValueError("n_taps must be odd for a centred linear-phase filter")
    f1, f2 = (f / sample_rate_hz for f in band_hz)
    m = np.arange(n_taps) - (n_taps - 1) / 2
    h = 2 * f2 * np.sinc(2 * f2 * m) - 2 * f1 * np.sinc(2 * f1 * m)
    h *= np.hamming(n_taps)
    centre = 0.5 * (f1 + f2)
    gain = abs(np.sum(h * np.exp(-2j * np.pi * centre * np.arange(n_taps))))
    return h / gain


_BANDPASS_CACHE: dict = {}


def bandpass_taps(sample_rate_hz: int = 16000) -> np.ndarray:
    if sample_rate_hz not in _BANDPASS_CACHE:
        _BANDPASS_CACHE[sample_rate_hz] = design_bandpass(sample_rate_hz)
    return _BANDPASS_CACHE[sample_rate_hz]


def _conv(x, h, lag):
    """y[t] = sum_k h[k] x[t + lag - k] for t < len(x)."""
    n = x.size
    if h.size == 1 and lag == 0:
        return x * h[0]
    return fftconvolve(x, h)[lag : lag + n]


def _conv_adjoint(y, h, lag):
    n = y.size
    if h.size == 1 and lag == 0:
        return y * h[0]
    start = h.size - 1 - lag
    return fftconvolve(y, h[::-1])[start : start + n]


def _as_samples(x):
    if isinstance(x, Waveform):
        return x.samples, x.sample_rate_hz
    return np.asarray(x, dtype=np.float64), None


def apply_linear(x, rir: Rir, bandpass: bool = False, sample_rate_hz: int = 16000) -> np.ndarray:
    """Convolution (truncated to len(x)) followed by the optional band-pass."""
    s, sr = _as_samples(x)
    sr = sr or sample_rate_hz
    z = _conv(s, rir.taps, 0)
    if bandpass:
        h = bandpass_taps(sr)
        z = _conv(z, h, (h.size - 1) // 2)
    return z


def adjoint_apply(grad_out, rir: Rir, bandpass: bool = False, sample_rate_hz: int = 16000) -> np.ndarray:
    """Exact adjoint of ``apply_linear``: <A x, y> == <x, A^T y>."""
    g, sr = _as_samples(grad_out)
    sr = sr or sample_rate_hz
    if bandpass:
        h = bandpass_taps(sr)
        g = _conv_adjoint(g, h, (h.size - 1) // 2)
    return _conv_adjoint(g, rir.taps, 0)


def renormalize(z: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(z)))
    return z / peak if peak > 1.0 else z


def apply_room(x, rir: Rir, bandpass: bool = False, sample_rate_hz: int = 16000):
    """Room output, scaled down only if its peak would exceed full scale."""
    y = renormalize(apply_linear(x, rir, bandpass, sample_rate_hz))
    if isinstance(x, Waveform):
        return Waveform(y, x.sample_rate_hz)
    return y


def room_vjp(x, rir: Rir, bandpass: bool, grad_out, sample_rate_hz: int = 16000) -> np.ndarray:
    """Gradient w.r.t. ``x`` of <grad_out, apply_room(x)>, renormalization included."""
    z = apply_linear(x, rir, bandpass, sample_rate_hz)
    g = np.asarray(grad_out, dtype=np.float64)
    k = int(np.argmax(np.abs(z)))
    peak = abs(z[k])
    if peak > 1.0:
        gz = g / peak
        gz[k] -= float(g @ z) / peak**2 * np.sign(z[k])
        g = gz
    return adjoint_apply(g, rir, bandpass, sample_rate_hz)


def save_room_bank(rirs, path, seed: int = 0, ranges: RoomRanges | None = None) -> None:
    header = json.dumps({"seed": seed, "ranges": asdict(ranges) if ranges else None}).encode()
    with open(path, "wb") as f:
        f.write(BANK_MAGIC + struct.pack("<III", BANK_VERSION, len(header), len(rirs)))
        f.write(header)
        for r in rirs:
            spec = r.spec.as_array() if r.spec is not None else np.full(18, np.nan)
            f.write(spec.astype("<f8").tobytes())
            f.write(struct.pack("<iI", r.delay, r.taps.size))
            f.write(np.ascontiguousarray(r.taps, dtype="<f8").tobytes())


def load_room_bank(path):
    """Return ``(rirs, header_dict)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != BANK_MAGIC:
        raise RoomBankFormatError(f"{path}: not a room bank file")
    try:
        version, hlen, count = struct.unpack_from("<III", data, 8)
        if version != BANK_VERSION:
            raise RoomBankFormatError(f"{path}: unsupported version {version}")
        pos = 20
        header = json.loads(data[pos : pos + hlen].decode())
        pos += hlen
        rirs = []
        for _ in range(count):
            spec_a = np.frombuffer(data, "<f8", 18, pos)
            pos += 144
            delay, ntaps = struct.unpack_from("<iI", data, pos)
            pos += 8
            taps = np.frombuffer(data, "<f8", ntaps, pos).copy()
            pos += 8 * ntaps
            spec = None if np.isnan(spec_a[0]) else RoomSpec.from_array(spec_a)
            rirs.append(Rir(taps, delay, spec))
    except (struct.error, ValueError) as e:
        if isinstance(e, RoomBankFormatError):
            raise
        raise RoomBankFormatError(f"{path}: corrupt room bank ({e})") from e
    if pos != len(data):
        raise RoomBankFormatError(f"{path}: trailing bytes in room bank")
    return rirs, header


def export_rir_wav(rir: Rir, path, sample_rate_hz: int = 16000) -> None:
    peak = float(np.max(np.abs(rir.taps))) or 1.0
    save_wav(Waveform(rir.taps / peak, sample_rate_hz), path)
