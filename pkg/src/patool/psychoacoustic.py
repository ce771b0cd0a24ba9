"""Per-frame global masking threshold and the perceptual loss built on it.

The threshold follows the usual MPEG-1 model-1 pipeline: SPL normalization,
tonal/non-tonal masker search, decimation, spreading and power-law
combination with the threshold in quiet. The weights ``10**(-beta*t)`` are
then folded into per-frame quadratic forms ``G = D^H W D`` so the loss on a
perturbation can be evaluated (and differentiated) without leaving the time
domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import PSD_FLOOR, FrameConfig, Spectrum, Waveform, bin_frequencies, segment, spectrum, write_matrix_csv

SPL_REFERENCE_DB = 96.0
DEFAULT_BETA = 0.06
DECIMATION_BARK = 0.5
TONAL_DOMINANCE_DB = 7.0
ATH_MIN_HZ = 20.0

# incremented once per frame threshold evaluation; tests use it to check that
# an attack analyses the original signal exactly once
threshold_evaluations = 0


@dataclass(frozen=True)
class SplPsd:
    levels_db_spl: np.ndarray
    norm_offset_db: float
    freqs_hz: np.ndarray

    @property
    def silent(self) -> bool:
        return math.isnan(self.norm_offset_db)


@dataclass(frozen=True)
class MaskerSet:
    tonal: list
    nontonal: list
    freqs_hz: np.ndarray

    def all(self):
        return [(b, lvl, True) for b, lvl in self.tonal] + [(b, lvl, False) for b, lvl in self.nontonal]


@dataclass(frozen=True)
class MaskingAnalysis:
    """Everything about the original signal that the perceptual loss needs.

    Built once from ``x``; never recomputed while the perturbation changes.
    """

    config: FrameConfig
    sample_rate_hz: int
    n_samples: int
    levels_db_spl: np.ndarray
    norm_offsets_db: np.ndarray
    thresholds_db: np.ndarray
    weights: np.ndarray
    beta: float
    maskers: tuple

    @property
    def n_frames(self) -> int:
        return self.thresholds_db.shape[0]

    @property
    def freqs_hz(self) -> np.ndarray:
        return bin_frequencies(self.config, self.sample_rate_hz)


def bark(f_hz):
    f = np.asarray(f_hz, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def _terhardt(f_hz):
    k = np.asarray(f_hz, dtype=np.float64) / 1000.0
    return 3.64 * k**-0.8 - 6.5 * np.exp(-0.6 * (k - 3.3) ** 2) + 1e-3 * k**4


def absolute_threshold(f_hz: float, sample_rate_hz: int = 16000) -> float:
    """Threshold in quiet (dB SPL), Terhardt's approximation."""
    if not ATH_MIN_HZ <= f_hz <= sample_rate_hz / 2:
        raise ValueError(f"frequency {f_hz} Hz outside [20, {sample_rate_hz / 2}]")
    return float(_terhardt(f_hz))


def ath_bins(freqs_hz: np.ndarray) -> np.ndarray:
    # the DC bin (and anything under 20 Hz) takes the 20 Hz value
    return _terhardt(np.maximum(freqs_hz, ATH_MIN_HZ))


def full_scale_offset_db(cfg: FrameConfig) -> float:
    """Offset mapping a full-scale bin-centred sinusoid to the SPL reference."""
    gain = float(np.mean(cfg.window_array()))
    return SPL_REFERENCE_DB - 10.0 * math.log10(cfg.frame_len / 4.0 * gain**2)


def spl_normalize(psd_db: np.ndarray, freqs_hz: np.ndarray) -> SplPsd:
    """Shift one frame's PSD so its peak sits at 96 dB SPL."""
    psd_db = np.asarray(psd_db, dtype=np.float64)
    peak = float(np.max(psd_db))
    if peak <= 10.0 * math.log10(PSD_FLOOR) + 1e-6:
        return SplPsd(psd_db.copy(), math.nan, freqs_hz)
    offset = SPL_REFERENCE_DB - peak
    return SplPsd(psd_db + offset, offset, freqs_hz)


def _tonal_neighbourhood(f_hz: float) -> int:
    if f_hz < 2500.0:
        return 2
    if f_hz < 5500.0:
        return 3
    return 6


def _power_sum_db(levels_db) -> float:
    return 10.0 * math.log10(float(np.sum(10.0 ** (np.asarray(levels_db) / 10.0))))


def find_maskers(spl: SplPsd) -> MaskerSet:
    if spl.silent:
        return MaskerSet([], [], spl.freqs_hz)
    P = spl.levels_db_spl
    f = spl.freqs_hz
    K = P.size
    tonal = []
    claimed = np.zeros(K, dtype=bool)
    claimed[0] = True  # DC never carries a masker
    for k in range(1, K - 1):
        if not (P[k] > P[k - 1] and P[k] > P[k + 1]):
            continue
        dk = _tonal_neighbourhood(f[k])
        if all(P[k] - P[j] >= TONAL_DOMINANCE_DB
               for d in range(2, dk + 1) for j in (k - d, k + d) if 0 <= j < K):
            tonal.append((k, _power_sum_db(P[k - 1 : k + 2])))
    for k, _ in tonal:
        dk = _tonal_neighbourhood(f[k])
        claimed[max(k - dk, 0) : k + dk + 1] = True

    band = np.floor(bark(f)).astype(int)
    nontonal = []
    for b in np.unique(band):
        members = np.flatnonzero((band == b) & ~claimed)
        if members.size == 0:
            continue
        centre = int(round(math.exp(np.mean(np.log(members)))))
        nontonal.append((centre, _power_sum_db(P[members])))
    return MaskerSet(tonal, nontonal, f)


def decimate_maskers(m: MaskerSet) -> MaskerSet:
    """Drop maskers below the threshold in quiet, then thin to one per 0.5 Bark."""
    ath = ath_bins(m.freqs_hz)
    z = bark(m.freqs_hz)
    audible = [(b, lvl, t) for b, lvl, t in m.all() if lvl >= ath[b]]
    # strongest first; ties resolved toward lower frequency for determinism
    audible.sort(key=lambda c: (-c[1], c[0]))
    kept = []
    for b, lvl, t in audible:
        if all(abs(z[b] - z[kb]) >= DECIMATION_BARK for kb, _, _ in kept):
            kept.append((b, lvl, t))
    kept.sort(key=lambda c: c[0])
    return MaskerSet([(b, l) for b, l, t in kept if t], [(b, l) for b, l, t in kept if not t], m.freqs_hz)


def spreading_db(dz: np.ndarray, level_db: float, f_hz: float) -> np.ndarray:
    """Two-slope spreading function; NaN outside [-3, 8) Bark."""
    fall = max(24.0 + 0.23 / (f_hz / 1000.0) - 0.2 * level_db, 0.0)
    sf = np.where(dz < 0, 27.0 * dz, -fall * dz)
    return np.where((dz >= -3.0) & (dz < 8.0), sf, np.nan)


def global_threshold(m: MaskerSet) -> np.ndarray:
    """Per-bin threshold (dB SPL) for one frame."""
    global threshold_evaluations
    threshold_evaluations += 1
    f = m.freqs_hz
    ath = ath_bins(f)
    maskers = m.all()
    if not maskers:
        return ath.copy()
    z = bark(f)
    total = 10.0 ** (ath / 10.0)
    for b, lvl, is_tonal in maskers:
        index = (-6.025 - 0.275 * z[b]) if is_tonal else (-2.025 - 0.175 * z[b])
        pattern = lvl + index + spreading_db(z - z[b], lvl, f[b])
        total = total + np.where(np.isnan(pattern), 0.0, 10.0 ** (np.nan_to_num(pattern) / 10.0))
    return np.maximum(10.0 * np.log10(total), ath)


def weights(thresholds_db: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return 10.0 ** (-beta * np.asarray(thresholds_db, dtype=np.float64))


def analyze(x, cfg: FrameConfig | None = None, beta: float = DEFAULT_BETA,
            sample_rate_hz: int | None = None) -> MaskingAnalysis:
    """Run the threshold pipeline on every frame of the original signal ``x``.

    The analysis frames use a Hann window but must stride by their full
    length so each perturbation sample belongs to exactly one frame.
    """
    if cfg is None:
        cfg = FrameConfig(512, 512, "hann")
    if cfg.hop != cfg.frame_len:
        raise ValueError("perceptual analysis needs hop == frame_len")
    if isinstance(x, Waveform):
        sample_rate_hz = x.sample_rate_hz
    elif sample_rate_hz is None:
        sample_rate_hz = 16000
    spec = spectrum(segment(x, cfg))
    freqs = bin_frequencies(cfg, sample_rate_hz)
    levels, offsets, thresholds, maskers = [], [], [], []
    for row in spec.psd_db:
        spl = spl_normalize(row, freqs)
        m = decimate_maskers(find_maskers(spl))
        levels.append(spl.levels_db_spl)
        offsets.append(spl.norm_offset_db)
        thresholds.append(global_threshold(m))
        maskers.append(m)
    t = np.array(thresholds)
    n = len(x.samples) if isinstance(x, Waveform) else len(x)
    return MaskingAnalysis(cfg, sample_rate_hz, n, np.array(levels), np.array(offsets),
                           t, weights(t, beta), beta, tuple(maskers))


def full_weights(w_half: np.ndarray) -> np.ndarray:
    """Mirror half-spectrum weights onto all L bins (conjugate-symmetric layout)."""
    return np.concatenate([w_half, w_half[-2:0:-1]])


def dft_matrix(L: int) -> np.ndarray:
    k = np.arange(L)
    return np.exp(-2j * np.pi * np.outer(k, k) / L) / math.sqrt(L)


def quadratic_form(w, frame_index: int = 0) -> np.ndarray:
    """Materialize ``G = D^H W D`` for one frame (real symmetric, L x L).

    ``w`` is either a MaskingAnalysis or an (N, L/2+1) weight array.
    """
    W = w.weights if isinstance(w, MaskingAnalysis) else np.atleast_2d(w)
    wf = full_weights(W[frame_index])
    L = wf.size
    if L > 512:
        raise ValueError("dense G is only built for L <= 512; use apply_quadratic_form")
    D = dft_matrix(L)
    G = D.conj().T @ (wf[:, None] * D)
    if np.max(np.abs(G.imag)) > 1e-10:
        raise ArithmeticError("quadratic form has a non-negligible imaginary part")
    return np.ascontiguousarray(G.real)


def apply_quadratic_form(w_half: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Matrix-free ``G_n @ d_n`` for each row; ``w_half`` is (N, L/2+1)."""
    L = frames.shape[-1]
    # unitary scalings of the forward and inverse transforms cancel
    return np.fft.irfft(w_half * np.fft.rfft(frames, axis=-1), n=L, axis=-1)


def _delta_frames(delta, analysis: MaskingAnalysis) -> np.ndarray:
    d = delta.samples if isinstance(delta, Waveform) else np.asarray(delta, dtype=np.float64)
    if d.size != analysis.n_samples:
        raise ValueError(f"delta has {d.size} samples, analysis expects {analysis.n_samples}")
    L = analysis.config.frame_len
    N = analysis.n_frames
    padded = np.zeros(N * L)
    padded[: d.size] = d
    return padded.reshape(N, L)


def perceptual_loss(delta, analysis: MaskingAnalysis):
    """Return ``(loss, grad)`` with loss = (1/2N) sum_n d_n^T G_n d_n."""
    frames = _delta_frames(delta, analysis)
    N = analysis.n_frames
    Gd = apply_quadratic_form(analysis.weights, frames)
    loss = float(np.sum(frames * Gd)) / (2 * N)
    grad = (Gd / N).reshape(-1)[: analysis.n_samples]
    return loss, grad


def spectral_perceptual_loss(delta, analysis: MaskingAnalysis) -> float:
    """Same loss evaluated as a weighted sum over every DFT bin of every frame."""
    frames = _delta_frames(delta, analysis)
    L = analysis.config.frame_len
    spec = np.fft.fft(frames, axis=-1) / math.sqrt(L)
    wf = np.apply_along_axis(full_weights, 1, analysis.weights)
    return float(np.sum(wf * np.abs(spec) ** 2)) / (2 * analysis.n_frames)


def export_threshold_csv(analysis: MaskingAnalysis, path) -> None:
    write_matrix_csv(path, analysis.freqs_hz, analysis.thresholds_db)


def export_spl_csv(analysis: MaskingAnalysis, path) -> None:
    write_matrix_csv(path, analysis.freqs_hz, analysis.levels_db_spl)


def delta_spl_db(delta, analysis: MaskingAnalysis) -> np.ndarray:
    """SPL of the perturbation's spectrum on the original frames' scale.

    Silent original frames have no offset of their own; they fall back to the
    full-scale calibration. Bins with zero energy come out as -inf.
    """
    frames = _delta_frames(delta, analysis) * analysis.config.window_array()[None, :]
    L = analysis.config.frame_len
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2 / L
    offsets = np.where(np.isnan(analysis.norm_offsets_db),
                       full_scale_offset_db(analysis.config), analysis.norm_offsets_db)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power) + offsets[:, None]
