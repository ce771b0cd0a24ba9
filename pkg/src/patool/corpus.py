"""Synthetic "tone-coded speech" for training and attacking the micro model.

Each non-blank symbol is rendered as a dual tone (one low and one high
component, DTMF style) separated by short silences, so a recognizer only has
to learn 28 spectral signatures.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .audio import Waveform, load_wav, save_wav
from .ctc import ALPHABET

LOW_TONES_HZ = (350.0, 470.0, 630.0, 850.0, 1100.0, 1400.0, 1750.0)
HIGH_TONES_HZ = (2300.0, 3000.0, 3900.0, 5000.0)

SYMBOL_TONES = {c: (LOW_TONES_HZ[i % 7], HIGH_TONES_HZ[i // 7]) for i, c in enumerate(ALPHABET[1:])}

WORDS = (
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "open", "door",
    "wave", "sky", "zero", "jam", "quiz", "box", "hello", "world", "light", "green",
    "vivid", "yes", "kite", "map", "don't", "it's", "we", "ax", "fix", "joy",
)

CHAR_S = 0.096
GAP_S = 0.032
LEAD_S = 0.064
RAMP_S = 0.004


def render(text: str, sample_rate_hz: int = 16000, amplitude: float = 0.25,
           duration_s: float | None = None, rng: np.random.Generator | None = None) -> Waveform:
    """Render ``text`` as tone bursts; pads with silence to ``duration_s``.

    With ``rng`` given, per-symbol timing, level and phase are jittered
    slightly (used for training variety).
    """
    sr = sample_rate_hz
    pieces = [np.zeros(int(LEAD_S * sr))]
    ramp = int(RAMP_S * sr)
    for c in text:
        lo, hi = SYMBOL_TONES[c]
        dur, gap, amp = CHAR_S, GAP_S, amplitude
        ph = (0.0, 0.0)
        if rng is not None:
            dur *= rng.uniform(0.85, 1.15)
            gap *= rng.uniform(0.75, 1.25)
            amp *= rng.uniform(0.7, 1.3)
            ph = tuple(rng.uniform(0, 2 * np.pi, 2))
        t = np.arange(int(dur * sr)) / sr
        burst = 0.5 * amp * (np.sin(2 * np.pi * lo * t + ph[0]) + np.sin(2 * np.pi * hi * t + ph[1]))
        env = np.ones_like(t)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        pieces += [burst * env, np.zeros(int(gap * sr))]
    x = np.concatenate(pieces)
    if duration_s is not None:
        n = int(round(duration_s * sr))
        if n < x.size:
            raise ValueError(f"{text!r} does not fit in {duration_s} s")
        x = np.concatenate([x, np.zeros(n - x.size)])
    return Waveform(np.clip(x, -1.0, 1.0), sr)


def max_symbols(duration_s: float) -> int:
    return int((duration_s - LEAD_S) / ((CHAR_S + GAP_S) * 1.15))


def random_phrase(rng: np.random.Generator, max_len: int) -> str:
    words = []
    while True:
        w = WORDS[rng.integers(len(WORDS))]
        candidate = " ".join(words + [w])
        if len(candidate) > max_len:
            break
        words.append(w)
    return " ".join(words) if words else WORDS[0][:max_len]


def toy_corpus(n: int, seed: int = 0, min_s: float = 1.0, max_s: float = 3.0,
               sample_rate_hz: int = 16000, jitter: bool = True):
    """``n`` seeded (Waveform, transcript) pairs, each ``min_s``..``max_s`` long."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        dur = float(rng.uniform(min_s, max_s))
        text = random_phrase(rng, max_symbols(dur))
        w = render(text, sample_rate_hz, duration_s=dur, rng=rng if jitter else None)
        out.append((w, text))
    return out


def training_corpus(seed: int = 0, n_phrases: int = 40, singles_per_symbol: int = 2,
                    n_triples: int = 40, sample_rate_hz: int = 16000):
    """Curriculum set: isolated symbols, random symbol triples, then phrases.

    CTC from scratch stalls on long phrases alone (every tone frame collapses
    onto the most frequent letter); the short items pin down the alignment.
    """
    rng = np.random.default_rng(seed)
    symbols = list(ALPHABET[1:])
    out = [(render(c, sample_rate_hz, rng=rng), c) for c in symbols for _ in range(singles_per_symbol)]
    for _ in range(n_triples):
        t = "".join(rng.choice(symbols, 3))
        out.append((render(t, sample_rate_hz, rng=rng), t))
    out += toy_corpus(n_phrases, seed=seed + 1, sample_rate_hz=sample_rate_hz)
    return out


def write_manifest(corpus, directory) -> Path:
    """Write each pair as a WAV plus a ``manifest.csv`` of (wav-path, transcript)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f)
        out.writerow(["wav", "transcript"])
        for i, (w, text) in enumerate(corpus):
            name = f"utt{i:03d}.wav"
            save_wav(w, directory / name)
            out.writerow([name, text])
    return manifest


def read_manifest(path):
    path = Path(path)
    pairs = []
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if rows and rows[0] == ["wav", "transcript"]:
        rows = rows[1:]
    for row in rows:
        if len(row) != 2:
            raise ValueError(f"{path}: malformed manifest row {row!r}")
        wav = Path(row[0])
        if not wav.is_absolute():
            wav = path.parent / wav
        pairs.append((load_wav(wav), row[1]))
    return pairs


def build_toy_model(seed: int = 0, epochs: int = 60, n_phrases: int = 40, progress=None):
    """Fit feature statistics and train a fresh micro model on ``training_corpus``."""
    from .ctc import fit_feature_stats, init_model, train_toy

    data = training_corpus(seed=seed, n_phrases=n_phrases)
    model = fit_feature_stats(init_model(seed), [w for w, _ in data])
    return train_toy(model, data, epochs=epochs, seed=seed)
