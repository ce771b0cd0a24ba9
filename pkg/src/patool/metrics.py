"""Transcription and signal-quality metrics.

WER/CER come from a minimum-edit alignment with unit costs. In place of a
listening-quality score the module reports ``masking_exceedance``: the share
of time-frequency cells where the perturbation rises above the original
signal's masking threshold.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .audio import snr_db
from .psychoacoustic import MaskingAnalysis, delta_spl_db


@dataclass(frozen=True)
class EditCounts:
    S: int
    D: int
    I: int
    C: int

    @property
    def N(self) -> int:
        return self.S + self.D + self.C

    @property
    def distance(self) -> int:
        return self.S + self.D + self.I


def edit_counts(reference, hypothesis) -> EditCounts:
    """Minimum-edit alignment counts.

    Among equal-cost alignments the backtrace prefers a match/substitution,
    then an insertion, then a deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i, j - 1] + 1, d[i - 1, j] + 1)
    S = D = I = C = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                C += 1
            else:
                S += 1
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return EditCounts(S, D, I, C)


def wer(reference: str, hypothesis: str) -> float:
    c = edit_counts(reference.split(), hypothesis.split())
    return c.distance / c.N


def cer(reference: str, hypothesis: str) -> float:
    c = edit_counts(reference, hypothesis)
    return c.distance / c.N


def masking_exceedance(x, delta, analysis: MaskingAnalysis) -> float:
    """Fraction of (frame, bin) cells where the perturbation is above threshold."""
    xs = getattr(x, "samples", x)
    ds = getattr(delta, "samples", delta)
    if len(xs) != len(ds):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ds)}")
    level = delta_spl_db(ds, analysis)
    return float(np.mean(level > analysis.thresholds_db))


REPORT_FIELDS = ("label", "wer", "cer", "snr_db", "masking_exceedance", "reference", "target", "decoded")


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return v


@dataclass(frozen=True)
class EvalReport:
    wer: float
    cer: float
    snr_db: float
    masking_exceedance: float
    reference: str
    target: str
    decoded: str
    label: str = "digital"

    def row(self) -> dict:
        return {k: _fmt(getattr(self, k)) for k in REPORT_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.row())


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def reports_to_jsonl(reports) -> str:
    return "".join(r.to_json() + "\n" for r in reports)


def evaluate(x, delta, target: str, model, analysis: MaskingAnalysis, rir=None,
             bandpass: bool = True, label: str | None = None) -> EvalReport:
    """Decode ``x + delta`` (through ``rir`` when given) and score it against ``target``."""
    from .ctc import transcribe
    from .room import apply_room

    xs = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    ds = np.asarray(getattr(delta, "samples", delta), dtype=np.float64)
    if xs.shape != ds.shape:
        raise ValueError(f"length mismatch: {xs.size} vs {ds.size}")
    adv = xs + ds
    clean = xs
    if rir is not None:
        adv = apply_room(adv, rir, bandpass)
        clean = apply_room(clean, rir, bandpass)
    decoded = transcribe(model, adv)
    return EvalReport(
        wer=wer(target, decoded), cer=cer(target, decoded), snr_db=snr_db(xs, ds),
        masking_exceedance=masking_exceedance(xs, ds, analysis),
        reference=transcribe(model, clean), target=target, decoded=decoded,
        label=label or ("room" if rir is not None else "digital"),
    )
