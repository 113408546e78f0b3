"""Attention probing of the black-box.

Two placements share one attention layer ``omega``:

* ``"input"``: attention over the raw features feeding a two-layer dense
  classifier (the self-attention network layout).
* ``"embedding"``: attention over the frozen encoder's embedding feeding a
  single softmax layer; scores are mapped back to input features through
  the encoder's absolute path weights.

Global attention is the head-averaged softmax of each attention matrix's
diagonal. The classifier sees its inputs min-max rescaled to [0, 1] with the
training range, and attention matrices start at zero (uniform attention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blackbox import Adam, TrainingError, _same_pad, softmax

MODES = ("input", "embedding")


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "input"
    k_heads: int = 1
    hidden: int = 32
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k_heads < 1:
            raise ValueError("k_heads must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be >= 1")


@dataclass
class AttentionProbe:
    mode: str
    weights: np.ndarray  # (k, D, D)
    biases: np.ndarray  # (k, D)
    dense: dict = field(default_factory=dict, repr=False)
    offset: np.ndarray | None = None  # (D,) training minimum
    span: np.ndarray | None = None  # (D,) training range, 1 for constant units

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[1] != self.weights.shape[2]:
            raise ValueError("attention weights must be k square matrices")
        if self.weights.shape[0] < 1:
            raise ValueError("need at least one head")
        if self.biases.shape != self.weights.shape[:2]:
            raise ValueError("one bias vector per head")

    @property
    def k_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class AttentionSummary:
    r_l: np.ndarray
    mode: str


@dataclass(frozen=True)
class FeatureRanking:
    input_scores: np.ndarray
    order: np.ndarray
    k: int

    @classmethod
    def from_scores(cls, scores, k: int) -> "FeatureRanking":
        scores = np.asarray(scores, dtype=np.float64)
        if not 1 <= k <= len(scores):
            raise ValueError("k must lie in [1, M]")
        return cls(scores, descending_order(scores), int(k))

    @property
    def top(self) -> np.ndarray:
        return self.order[: self.k]

    @property
    def bottom(self) -> np.ndarray:
        return top_bottom_k(self.input_scores, self.k)[1]

    def to_json(self, mode: str | None = None) -> dict:
        return {
            "mode": mode,
            "k": self.k,
            "scores": [float(f"{s:.12g}") for s in self.input_scores],
            "order": [int(i) for i in self.order],
        }


def descending_order(scores) -> np.ndarray:
    """Indices by descending score, lower index first on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def top_bottom_k(scores, k: int):
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= len(scores):
        raise ValueError("k must lie in [1, M]")
    top = descending_order(scores)[:k]
    bottom = np.lexsort((np.arange(len(scores)), scores))[:k]
    return top, bottom


def _omega(probe, V):
    """Forward pass of the attention layer on a batch; returns output and cache."""
    U = np.einsum("bj,kij->kbi", V, probe.weights) + probe.biases[:, None, :]
    S = softmax(U)
    out = (V[None] * S).mean(axis=0)
    return out, S


def omega_forward(probe: AttentionProbe, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = v[None] if single else v
    if V.shape[-1] != probe.dim:
        raise ValueError(f"expected vectors of length {probe.dim}")
    out, _ = _omega(probe, V)
    return out[0] if single else out


def extract_attention(probe: AttentionProbe) -> AttentionSummary:
    diags = np.diagonal(probe.weights, axis1=1, axis2=2)
    return AttentionSummary(softmax(diags).mean(axis=0), probe.mode)


def rescale(probe, V) -> np.ndarray:
    """Min-max map of attended vectors with the probe's training range."""
    V = np.asarray(V, dtype=np.float64)
    if probe.offset is None:
        return V
    return (V - probe.offset) / probe.span


def _probe_forward(probe, V):
    """Classifier on top of omega; ``V`` must already be rescaled."""
    d = probe.dense
    O, S = _omega(probe, V)
    if probe.mode == "input":
        pre = O @ d["W1"] + d["b1"]
        H = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))
        logits = H @ d["W2"] + d["b2"]
        return softmax(logits), (O, S, pre, H)
    logits = O @ d["W1"] + d["b1"]
    return softmax(logits), (O, S, None, None)


def probe_predict_proba(probe, V) -> np.ndarray:
    """Class probabilities for raw attended vectors (rescaling applied here)."""
    return _probe_forward(probe, rescale(probe, V))[0]


def _probe_grads(probe, V, y):
    B = len(y)
    d = probe.dense
    probs, (O, S, pre, H) = _probe_forward(probe, V)
    loss = -np.log(np.clip(probs[np.arange(B), y], 1e-300, None)).mean()
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    g = {}
    if probe.mode == "input":
        g["W2"] = H.T @ dlogits
        g["b2"] = dlogits.sum(axis=0)
        dH = dlogits @ d["W2"].T
        dpre = dH * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))
        g["W1"] = O.T @ dpre
        g["b1"] = dpre.sum(axis=0)
        dO = dpre @ d["W1"].T
    else:
        g["W1"] = O.T @ dlogits
        g["b1"] = dlogits.sum(axis=0)
        dO = dlogits @ d["W1"].T
    k = probe.k_heads
    dS = dO[None] * V[None] / k
    dU = S * (dS - (dS * S).sum(axis=-1, keepdims=True))
    g["att_W"] = np.einsum("kbi,bj->kij", dU, V)
    g["att_b"] = dU.sum(axis=1)
    return loss, g


def init_probe(dim: int, n_classes: int, config: ProbeConfig, V=None) -> AttentionProbe:
    """Zero attention weights, Glorot dense layers; ``V`` fixes the rescaling range."""
    rng = np.random.default_rng([config.seed, 2])

    def glorot(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    weights = np.zeros((config.k_heads, dim, dim))
    biases = np.zeros((config.k_heads, dim))
    if config.mode == "input":
        dense = {
            "W1": glorot((dim, config.hidden), dim, config.hidden),
            "b1": np.zeros(config.hidden),
            "W2": glorot((config.hidden, n_classes), config.hidden, n_classes),
            "b2": np.zeros(n_classes),
        }
    else:
        dense = {"W1": glorot((dim, n_classes), dim, n_classes), "b1": np.zeros(n_classes)}
    offset = span = None
    if V is not None:
        offset = V.min(axis=0)
        span = V.max(axis=0) - offset
        span[span == 0] = 1.0
    return AttentionProbe(config.mode, weights, biases, dense, offset, span)


def attended_inputs(blackbox, X, mode: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return blackbox.embed(X) if mode == "embedding" else X


def train_probe(blackbox, dataset, k_heads: int | None = None, config: ProbeConfig = ProbeConfig()):
    """Fit attention heads plus a classifier; the black-box encoder stays frozen.

    Returns (probe, history) where history is the per-epoch mean CE.
    """
    if k_heads is not None:
        if k_heads < 1:
            raise ValueError("k_heads must be >= 1")
        config = ProbeConfig(**{**config.__dict__, "k_heads": k_heads})
    V = attended_inputs(blackbox, dataset.features, config.mode)
    y = np.asarray(dataset.labels, dtype=np.int64)
    probe = init_probe(V.shape[1], dataset.n_classes, config, V)
    V = rescale(probe, V)

    params = {"att_W": probe.weights, "att_b": probe.biases, **probe.dense}
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 3])
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _probe_grads(probe, V[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite probe loss at epoch {epoch}")
            opt.step(params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return probe, history


def path_weights(blackbox) -> np.ndarray:
    """(M, K) matrix of absolute input-to-embedding path weights.

    Pooling is treated as pass-through: embedding unit (c, p) collects
    every conv output in its window.
    """
    M, L = blackbox.n_features, blackbox.kernel_size
    P, Lp, C = blackbox.pool_size, blackbox.pooled_length, blackbox.channels
    W = np.abs(blackbox.params["enc_W"])
    gain = np.abs(blackbox.params.get("enc_g", np.ones(M)))
    left, _ = _same_pad(L)
    # conv output i reads input i + t - left with weight W[c, t]
    conv_paths = np.zeros((M, C, M))
    for t in range(L):
        j = np.arange(M) + t - left
        ok = (j >= 0) & (j < M)
        conv_paths[j[ok], :, np.arange(M)[ok]] += W[:, t]
    pad = Lp * P - M
    conv_paths = np.pad(conv_paths, [(0, 0), (0, 0), (0, pad)])
    pooled = conv_paths.reshape(M, C, Lp, P).sum(axis=-1)
    return gain[:, None] * pooled.reshape(M, C * Lp)


def project_to_inputs(summary: AttentionSummary, blackbox=None, paths: np.ndarray | None = None) -> np.ndarray:
    """Map attention over the attended space to normalized input-feature scores."""
    r = np.asarray(summary.r_l, dtype=np.float64)
    if summary.mode == "input":
        return r / r.sum()
    if paths is None:
        paths = path_weights(blackbox)
    if paths.shape[1] != len(r):
        raise ValueError("path matrix does not match the attended space")
    scores = np.abs(paths) @ r
    total = scores.sum()
    return scores / total if total > 0 else np.full(paths.shape[0], 1.0 / paths.shape[0])


SELECTIONS = ("attention", "deviation")


def selection_scores(scores, selection: str = "deviation") -> np.ndarray:
    """Scores that decide which features enter the top-k.

    ``attention`` keeps the attention distribution. ``deviation`` scores
    |r - 1/M|: the sign a feature's attention takes is arbitrary, so useful
    features drift to either end of the ranking and both ends count.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    scores = np.asarray(scores, dtype=np.float64)
    if selection == "attention":
        return scores
    dev = np.abs(scores - 1.0 / len(scores))
    total = dev.sum()
    return dev / total if total > 0 else np.full(len(scores), 1.0 / len(scores))


def rank_features(blackbox, probe: AttentionProbe, k: int) -> FeatureRanking:
    scores = project_to_inputs(extract_attention(probe), blackbox)
    return FeatureRanking.from_scores(scores, k)
