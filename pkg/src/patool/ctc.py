"""A small end-to-end differentiable CTC recognizer and its tooling.

The model maps raw samples to per-frame character logits:
Hann-windowed log power spectra, +-1 frame context stacking, two tanh
layers and a linear read-out over a 29-symbol alphabet. Every stage has a
hand-written backward pass so gradients reach the waveform exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .audio import FrameConfig, Waveform, overlap_add, segment

BLANK = 0
ALPHABET = ("-", " ", "'") + tuple("abcdefghijklmnopqrstuvwxyz")
CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}
LOG_POWER_EPS = 1e-10

MODEL_MAGIC = b"PATCTC\x00\x01"
MODEL_VERSION = 1


class InfeasibleTargetError(ValueError):
    """The target transcript cannot be aligned to the available frames."""


class ModelFormatError(ValueError):
    """Model file has the wrong magic bytes, version, or is truncated."""


def encode(text: str) -> list[int]:
    try:
        return [CHAR_INDEX[c] for c in text]
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} is not in the alphabet") from None


def decode_labels(labels) -> str:
    return "".join(ALPHABET[i] for i in labels)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per symbol plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


@dataclass
class MicroCtcModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    frame_len: int = 256
    hop: int = 128
    context: int = 1
    sample_rate_hz: int = 16000
    seed: int = 0

    PARAMS = ("W1", "b1", "W2", "b2", "W3", "b3")

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.frame_len, self.hop, "hann")

    @property
    def n_features(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def hidden(self) -> int:
        return self.b1.size

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "MicroCtcModel":
        return replace(self, **{k: getattr(self, k).copy() for k in self.PARAMS + ("feat_mean", "feat_std")})

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop)


def init_model(seed: int = 0, hidden: int = 128, frame_len: int = 256, hop: int = 128,
               sample_rate_hz: int = 16000, context: int = 1) -> MicroCtcModel:
    """Seeded uniform(-0.1, 0.1) weights, zero biases, identity feature scaling."""
    rng = np.random.default_rng(seed)
    F = frame_len // 2 + 1
    n_in = (2 * context + 1) * F
    C = len(ALPHABET)
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    return MicroCtcModel(
        W1=u(n_in, hidden), b1=np.zeros(hidden),
        W2=u(hidden, hidden), b2=np.zeros(hidden),
        W3=u(hidden, C), b3=np.zeros(C),
        feat_mean=np.zeros(F), feat_std=np.ones(F),
        frame_len=frame_len, hop=hop, context=context,
        sample_rate_hz=sample_rate_hz, seed=seed,
    )


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def log_power_features(model: MicroCtcModel, x) -> np.ndarray:
    frames = segment(_samples(x), model.frame_config).frames
    X = np.fft.rfft(frames, axis=-1) / math.sqrt(model.frame_len)
    return np.log(np.abs(X) ** 2 + LOG_POWER_EPS)


def fit_feature_stats(model: MicroCtcModel, waveforms) -> MicroCtcModel:
    """Set the per-bin feature standardization from a set of waveforms."""
    feats = np.concatenate([log_power_features(model, w) for w in waveforms])
    out = model.copy()
    out.feat_mean = feats.mean(axis=0)
    # bins that barely vary would otherwise be blown up into huge inputs
    out.feat_std = np.maximum(feats.std(axis=0), 1.0)
    return out


def _stack_context(f: np.ndarray, c: int) -> np.ndarray:
    T, F = f.shape
    padded = np.zeros((T + 2 * c, F))
    padded[c : c + T] = f
    return np.concatenate([padded[i : i + T] for i in range(2 * c + 1)], axis=1)


def _unstack_context(dS: np.ndarray, c: int, F: int) -> np.ndarray:
    T = dS.shape[0]
    padded = np.zeros((T + 2 * c, F))
    for i in range(2 * c + 1):
        padded[i : i + T] += dS[:, i * F : (i + 1) * F]
    return padded[c : c + T]


def _forward(model: MicroCtcModel, x):
    s = _samples(x)
    frames = segment(s, model.frame_config).frames
    L = model.frame_len
    X = np.fft.rfft(frames, axis=-1) / math.sqrt(L)
    P = np.abs(X) ** 2
    f = (np.log(P + LOG_POWER_EPS) - model.feat_mean) / model.feat_std
    S = _stack_context(f, model.context)
    h1 = np.tanh(S @ model.W1 + model.b1)
    h2 = np.tanh(h1 @ model.W2 + model.b2)
    logits = h2 @ model.W3 + model.b3
    cache = dict(n=s.size, X=X, P=P, S=S, h1=h1, h2=h2)
    return logits, cache


def _backward(model: MicroCtcModel, cache, dlogits, want_input=True, want_params=False):
    h1, h2 = cache["h1"], cache["h2"]
    grads = {}
    dh2 = dlogits @ model.W3.T
    dz2 = dh2 * (1.0 - h2**2)
    dh1 = dz2 @ model.W2.T
    dz1 = dh1 * (1.0 - h1**2)
    if want_params:
        grads = dict(W3=h2.T @ dlogits, b3=dlogits.sum(0), W2=h1.T @ dz2, b2=dz2.sum(0),
                     W1=cache["S"].T @ dz1, b1=dz1.sum(0))
    dx = None
    if want_input:
        L = model.frame_len
        df = _unstack_context(dz1 @ model.W1.T, model.context, model.n_features)
        dP = df / model.feat_std / (cache["P"] + LOG_POWER_EPS)
        c = 2.0 * dP * cache["X"]
        c[:, 1:-1] *= 0.5
        dframes = math.sqrt(L) * np.fft.irfft(c, n=L, axis=-1)
        dframes *= model.frame_config.window_array()[None, :]
        dx = overlap_add(dframes, model.hop, cache["n"])
    return dx, grads


def forward(model: MicroCtcModel, x) -> np.ndarray:
    """Per-frame logits, shape (T, 29) with T = ceil(len(x) / hop)."""
    return _forward(model, x)[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _labels(target) -> list[int]:
    if isinstance(target, str):
        return encode(target)
    return list(target)


def ctc_forward_backward(log_probs: np.ndarray, labels):
    """Log-space alpha/beta recursions over the blank-extended label sequence.

    Returns ``(log_likelihood, log_alpha, log_beta, extended)``; ``log_beta``
    excludes the emission at its own frame.
    """
    T = log_probs.shape[0]
    ext = np.full(2 * len(labels) + 1, BLANK)
    ext[1::2] = labels
    S = ext.size
    # a skip from s-2 to s is allowed onto a non-blank that differs from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    lp = log_probs[:, ext]
    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t]
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    ends = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return float(ends), alpha, beta, ext


def ctc_loss(logits: np.ndarray, target):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logits``."""
    labels = _labels(target)
    if not labels:
        raise ValueError("target must be non-empty")
    T = logits.shape[0]
    if min_frames(labels) > T:
        raise InfeasibleTargetError(
            f"target needs {min_frames(labels)} frames, only {T} available")
    lp = log_softmax(logits)
    ll, alpha, beta, ext = ctc_forward_backward(lp, labels)
    if math.isnan(ll):
        # non-finite logits; let the caller decide how to fail
        return math.nan, np.full_like(logits, math.nan)
    if not np.isfinite(ll):
        raise InfeasibleTargetError("target has zero probability under every alignment")
    post = np.exp(alpha + beta - ll)
    occupancy = np.zeros_like(logits)
    for s, k in enumerate(ext):
        occupancy[:, k] += post[:, s]
    grad = np.exp(lp) - occupancy
    return -ll, grad


def input_gradient(model: MicroCtcModel, x, target):
    """CTC loss of ``target`` on ``x`` and its gradient w.r.t. every sample."""
    logits, cache = _forward(model, x)
    loss, dlogits = ctc_loss(logits, target)
    dx, _ = _backward(model, cache, dlogits)
    return loss, dx


def greedy_decode(logits: np.ndarray) -> str:
    best = np.argmax(logits, axis=-1)
    out = []
    prev = -1
    for k in best:
        if k != prev and k != BLANK:
            out.append(ALPHABET[k])
        prev = k
    return "".join(out)


def transcribe(model: MicroCtcModel, x) -> str:
    return greedy_decode(forward(model, x))


@dataclass
class TrainResult:
    model: MicroCtcModel
    epoch_losses: list = field(default_factory=list)
    skipped: int = 0


def corpus_loss(model: MicroCtcModel, corpus) -> float:
    total, n = 0.0, 0
    for w, text in corpus:
        logits = forward(model, w)
        try:
            total += ctc_loss(logits, text)[0]
            n += 1
        except InfeasibleTargetError:
            continue
    return total / max(n, 1)


def train_toy(model: MicroCtcModel, corpus, epochs: int = 60, lr: float = 1e-3,
              batch_size: int = 4, seed: int = 0) -> TrainResult:
    """Adam on the mean CTC loss over minibatches in a seeded order.

    Works on a private copy. Infeasible pairs are skipped and counted.
    ``epoch_losses[i]`` is the corpus loss after epoch ``i``; index 0 is the
    loss before any update.
    """
    model = model.copy()
    usable = []
    skipped = 0
    for w, text in corpus:
        labels = encode(text)
        if not labels or min_frames(labels) > model.n_frames(len(_samples(w))):
            skipped += 1
            continue
        usable.append((w, labels))
    if not usable:
        raise ValueError("corpus has no usable (waveform, transcript) pairs")
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in model.params().items()}
    v = {k: np.zeros_like(val) for k, val in model.params().items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = [corpus_loss(model, usable)]
    for _ in range(epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            acc = {k: np.zeros_like(val) for k, val in model.params().items()}
            for i in batch:
                w, labels = usable[i]
                logits, cache = _forward(model, w)
                _, dlogits = ctc_loss(logits, labels)
                _, g = _backward(model, cache, dlogits, want_input=False, want_params=True)
                for k in acc:
                    acc[k] += g[k]
            step += 1
            for k, p in model.params().items():
                g = acc[k] / len(batch)
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1**step)
                vhat = v[k] / (1 - b2**step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
        losses.append(corpus_loss(model, usable))
    return TrainResult(model, losses, skipped)


def save_model(model: MicroCtcModel, path) -> None:
    arrays = [getattr(model, k) for k in MicroCtcModel.PARAMS] + [model.feat_mean, model.feat_std]
    header = struct.pack("<8sI7I", MODEL_MAGIC, MODEL_VERSION, model.frame_len, model.hop,
                         model.context, model.sample_rate_hz, model.hidden, len(ALPHABET), model.seed)
    with open(path, "wb") as f:
        f.write(header)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> MicroCtcModel:
    with open(path, "rb") as f:
        data = f.read()
    head = struct.calcsize("<8sI7I")
    if len(data) < 8 or data[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic bytes)")
    if len(data) < head:
        raise ModelFormatError(f"{path}: truncated header")
    _, version, L, hop, ctx, sr, H, C, seed = struct.unpack("<8sI7I", data[:head])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    if C != len(ALPHABET):
        raise ModelFormatError(f"{path}: alphabet size {C} does not match")
    F = L // 2 + 1
    shapes = [((2 * ctx + 1) * F, H), (H,), (H, H), (H,), (H, C), (C,), (F,), (F,)]
    expected = head + 8 * sum(math.prod(s) for s in shapes)
    if len(data) != expected:
        raise ModelFormatError(f"{path}: corrupt file ({len(data)} bytes, expected {expected})")
    arrays, pos = [], head
    for s in shapes:
        n = math.prod(s)
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(s).astype(np.float64))
        pos += 8 * n
    return MicroCtcModel(*arrays, frame_len=L, hop=hop, context=ctx, sample_rate_hz=sr, seed=seed)
