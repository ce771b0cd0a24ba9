"""Targeted l2 attack with a masking-threshold perceptual penalty.

Minimizes ``alpha * CTC(x + delta, target) + (1 - alpha) * L_percep(delta)``
over the l2 ball of radius epsilon with normalized-gradient projected
gradient descent, keeping ``x + delta`` inside [-1, 1]. The masking analysis
of ``x`` is computed once up front; each step only needs time-domain
products with the fixed per-frame quadratic forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ctc
from .audio import INT16_SCALE, Waveform
from .psychoacoustic import DEFAULT_BETA, MaskingAnalysis, analyze, perceptual_loss
from .room import Rir, apply_room, room_vjp

GRAD_EPS = 1e-12


class AttackDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EotConfig:
    num_rooms: int = 10
    rooms_per_iter: int = 4
    bandpass: bool = True
    bank_seed: int = 1

    def __post_init__(self):
        if not 1 <= self.rooms_per_iter <= self.num_rooms:
            raise ValueError("rooms_per_iter must lie in [1, num_rooms]")


@dataclass(frozen=True)
class AttackConfig:
    """Every optimization knob. ``epsilon`` and ``mu`` share ``units``.

    ``units='int16'`` reads them on the 16-bit sample scale (epsilon=1000
    means 1000/32768 on normalized audio). ``percep_units`` picks the scale
    the perceptual loss sees the perturbation on; int16 keeps it in balance
    with CTC losses of order 10-100 nats.
    """

    alpha: float = 1.0
    epsilon: float = 1000.0
    units: str = "int16"
    mu: float | None = None
    max_iters: int = 2000
    beta: float = DEFAULT_BETA
    seed: int = 0
    percep_units: str = "int16"
    check_every: int = 1
    eot: EotConfig | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.units not in ("int16", "normalized") or self.percep_units not in ("int16", "normalized"):
            raise ValueError("units must be 'int16' or 'normalized'")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")

    @property
    def _scale(self) -> float:
        return INT16_SCALE if self.units == "int16" else 1.0

    @property
    def epsilon_norm(self) -> float:
        return self.epsilon / self._scale

    @property
    def mu_norm(self) -> float:
        return (self.mu / self._scale) if self.mu is not None else self.epsilon_norm / 20.0

    @property
    def percep_scale(self) -> float:
        return INT16_SCALE if self.percep_units == "int16" else 1.0


@dataclass
class AttackResult:
    delta: np.ndarray
    success: bool
    iterations_used: int
    loss_trace: list = field(default_factory=list)
    decoded: str = ""
    target: str = ""

    def trace_csv(self) -> str:
        lines = ["iter,L_tot,L_ctc,L_percep,delta_l2,success_flag"]
        for it, lt, lc, lp, norm, ok in self.loss_trace:
            lines.append(f"{it},{lt:.6g},{lc:.6g},{lp:.6g},{norm:.6g},{int(ok)}")
        return "\n".join(lines) + "\n"


def _arr(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def project_l2(z, epsilon: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norm = float(np.linalg.norm(z))
    if norm <= epsilon:
        return z
    return z * (epsilon / norm)


def clip_box(delta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pull ``x + delta`` back into [-1, 1]; in-range samples keep their exact value."""
    y = x + delta
    return np.where(np.abs(y) > 1.0, np.clip(y, -1.0, 1.0) - x, delta)


def pgd_step(delta, grad, mu: float, epsilon: float, x) -> np.ndarray:
    """One normalized-gradient step, then box clip, then l2 projection."""
    delta, grad, x = _arr(delta), _arr(grad), _arr(x)
    gnorm = float(np.linalg.norm(grad))
    z = delta - mu * grad / gnorm if gnorm >= GRAD_EPS else delta.copy()
    z = project_l2(clip_box(z, x), epsilon)
    if np.any(np.abs(x + z) > 1.0):
        z = clip_box(z, x)
    return z


def _percep_terms(delta, analysis, alpha, scale):
    lp, gp = perceptual_loss(delta * scale, analysis)
    return lp, gp * scale


def total_loss(x, delta, target, alpha: float, analysis: MaskingAnalysis, model,
               percep_scale: float = INT16_SCALE):
    """``(L_tot, grad)`` of the weighted CTC + perceptual objective at ``delta``."""
    lt, g, _, _, _ = _loss_terms(_arr(x), _arr(delta), target, alpha, analysis, model, percep_scale)
    return lt, g


def _loss_terms(x, delta, target, alpha, analysis, model, percep_scale):
    logits, cache = ctc._forward(model, x + delta)
    lc, dlogits = ctc.ctc_loss(logits, target)
    gc, _ = ctc._backward(model, cache, dlogits)
    lp, gp = _percep_terms(delta, analysis, alpha, percep_scale)
    if alpha == 1.0:
        # the perceptual term is reported but contributes nothing
        return lc, gc, lc, lp, logits
    return alpha * lc + (1.0 - alpha) * lp, alpha * gc + (1.0 - alpha) * gp, lc, lp, logits


def _check_target(model, n_samples, target):
    labels = ctc.encode(target)
    if not labels:
        raise ValueError("target must be non-empty")
    need = ctc.min_frames(labels)
    if need > model.n_frames(n_samples):
        raise ctc.InfeasibleTargetError(
            f"target needs {need} frames, input has {model.n_frames(n_samples)}")


def _finite(*values):
    if not all(math.isfinite(v) for v in values):
        raise AttackDivergedError(f"non-finite loss encountered: {values}")


def run_attack(x, target: str, model, cfg: AttackConfig, analysis: MaskingAnalysis | None = None,
               progress=None) -> AttackResult:
    """Plain digital-domain attack; stops at the first iterate that decodes to ``target``."""
    xs = _arr(x)
    _check_target(model, xs.size, target)
    if analysis is None:
        analysis = analyze(x, beta=cfg.beta)
    eps, mu = cfg.epsilon_norm, cfg.mu_norm
    delta = np.zeros_like(xs)
    trace = []
    decoded = ""
    success = False
    it = 0
    for it in range(cfg.max_iters + 1):
        lt, g, lc, lp, logits = _loss_terms(xs, delta, target, cfg.alpha, analysis, model, cfg.percep_scale)
        _finite(lt, lc, lp)
        if it % cfg.check_every == 0 or it == cfg.max_iters:
            decoded = ctc.greedy_decode(logits)
            success = decoded == target
        trace.append((it, lt, lc, lp, float(np.linalg.norm(delta)), success))
        if progress is not None:
            progress(it, lt, success)
        if success or it == cfg.max_iters:
            break
        delta = pgd_step(delta, g, mu, eps, xs)
    return AttackResult(delta, success, it, trace, decoded, target)


class RoomSampler:
    """Seeded draws of ``k`` training rooms per iteration plus a fixed check room."""

    def __init__(self, rooms, k: int, check_room: Rir, seed: int = 0):
        if not 1 <= k <= len(rooms):
            raise ValueError("k must lie in [1, len(rooms)]")
        self.rooms = list(rooms)
        self.k = k
        self.check_room = check_room
        self.rng = np.random.default_rng(seed)

    def sample(self):
        if self.k == len(self.rooms):
            return self.rooms
        idx = self.rng.choice(len(self.rooms), self.k, replace=False)
        return [self.rooms[i] for i in sorted(idx)]


def _eot_terms(x, delta, target, cfg, analysis, model, rooms, bandpass):
    adv = x + delta
    lcs, gcs = [], []
    for r in rooms:
        y = apply_room(adv, r, bandpass)
        logits, cache = ctc._forward(model, y)
        lc, dlogits = ctc.ctc_loss(logits, target)
        gy, _ = ctc._backward(model, cache, dlogits)
        lcs.append(lc)
        gcs.append(room_vjp(adv, r, bandpass, gy))
    # fixed summation order keeps the estimate deterministic
    lc = math.fsum(lcs) / len(lcs)
    gc = np.sum(gcs, axis=0) / len(gcs)
    lp, gp = _percep_terms(delta, analysis, cfg.alpha, cfg.percep_scale)
    if cfg.alpha == 1.0:
        return lc, gc, lc, lp
    return cfg.alpha * lc + (1 - cfg.alpha) * lp, cfg.alpha * gc + (1 - cfg.alpha) * gp, lc, lp


def run_attack_eot(x, target: str, model, cfg: AttackConfig, room_sampler: RoomSampler,
                   analysis: MaskingAnalysis | None = None, progress=None) -> AttackResult:
    """Attack averaged over simulated rooms; success is judged in the check room."""
    eot = cfg.eot or EotConfig()
    xs = _arr(x)
    _check_target(model, xs.size, target)
    if analysis is None:
        analysis = analyze(x, beta=cfg.beta)
    eps, mu = cfg.epsilon_norm, cfg.mu_norm
    delta = np.zeros_like(xs)
    trace = []
    decoded = ""
    success = False
    it = 0
    for it in range(cfg.max_iters + 1):
        if it % cfg.check_every == 0 or it == cfg.max_iters:
            heard = apply_room(xs + delta, room_sampler.check_room, eot.bandpass)
            decoded = ctc.transcribe(model, heard)
            success = decoded == target
        if success or it == cfg.max_iters:
            lt, _, lc, lp = _eot_terms(xs, delta, target, cfg, analysis, model,
                                       room_sampler.rooms[:1], eot.bandpass)
            trace.append((it, lt, lc, lp, float(np.linalg.norm(delta)), success))
            break
        lt, g, lc, lp = _eot_terms(xs, delta, target, cfg, analysis, model,
                                   room_sampler.sample(), eot.bandpass)
        _finite(lt, lc, lp)
        trace.append((it, lt, lc, lp, float(np.linalg.norm(delta)), success))
        if progress is not None:
            progress(it, lt, success)
        delta = pgd_step(delta, g, mu, eps, xs)
    return AttackResult(delta, success, it, trace, decoded, target)
