"""Convolutional autoencoder-classifier used as the black-box model.

Each input column is first scaled by a learned per-feature gain (a shared
kernel cannot tell columns apart, so without it max-pooling drowns a few
informative columns in noise). A single 1-D convolution then runs along
the feature axis, followed by ELU and
non-overlapping max-pooling; the pooled maps, flattened, form the
embedding ``z``. A dense softmax head classifies ``z``. The decoder unpools
``z`` through the recorded switches and applies a second convolution plus a
sigmoid to reconstruct a min-max rescaled copy of the input.

All gradients are written out by hand; ``gradient_check`` compares them
against central finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_NAMES = ("enc_g", "enc_W", "enc_b", "dec_W", "dec_b", "head_W", "head_b")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha_r: float = 1.0
    alpha_ce: float = 1.0
    weight_decay: float = 0.0
    gain_l1: float = 0.02
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha_r < 0 or self.alpha_ce < 0 or (self.alpha_r == 0 and self.alpha_ce == 0):
            raise ValueError("alpha_r and alpha_ce must be >= 0 and not both zero")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.gain_l1 < 0:
            raise ValueError("gain_l1 must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class PoolSwitches:
    """Absolute argmax positions, shape (batch, channels, pooled_length)."""

    positions: np.ndarray


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: int
    embedding: np.ndarray


@dataclass
class AutoencoderClassifier:
    n_features: int
    n_classes: int
    channels: int
    pool_size: int
    kernel_size: int
    params: dict = field(repr=False)
    recon_min: np.ndarray = field(repr=False, default=None)
    recon_max: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.recon_min is None:
            self.recon_min = np.zeros(self.n_features)
        if self.recon_max is None:
            self.recon_max = np.ones(self.n_features)

    @property
    def pooled_length(self) -> int:
        return math.ceil(self.n_features / self.pool_size)

    @property
    def embedding_dim(self) -> int:
        return self.channels * self.pooled_length

    @classmethod
    def initialize(
        cls,
        n_features: int,
        n_classes: int,
        channels: int = 1,
        pool_size: int = 2,
        kernel_size: int = 1,
        seed: int = 0,
    ) -> "AutoencoderClassifier":
        """Glorot-uniform weights, zero biases."""
        if pool_size < 1 or kernel_size < 1 or channels < 1:
            raise ValueError("channels, pool_size and kernel_size must be >= 1")
        K = channels * math.ceil(n_features / pool_size)
        if K >= n_features:
            raise ValueError(f"embedding dim {K} must be smaller than the input dim {n_features}")
        rng = np.random.default_rng(seed)

        def glorot(shape, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        L = kernel_size
        params = {
            "enc_g": np.ones(n_features),
            "enc_W": glorot((channels, L), L, channels * L),
            "enc_b": np.zeros(channels),
            "dec_W": glorot((channels, L), channels * L, L),
            "dec_b": np.zeros(1),
            "head_W": glorot((K, n_classes), K, n_classes),
            "head_b": np.zeros(n_classes),
        }
        return cls(n_features, n_classes, channels, pool_size, kernel_size, params)

    def copy(self) -> "AutoencoderClassifier":
        return AutoencoderClassifier(
            self.n_features,
            self.n_classes,
            self.channels,
            self.pool_size,
            self.kernel_size,
            {k: v.copy() for k, v in self.params.items()},
            self.recon_min.copy(),
            self.recon_max.copy(),
        )

    def fit_reconstruction_range(self, X: np.ndarray) -> None:
        self.recon_min = X.min(axis=0)
        self.recon_max = X.max(axis=0)

    def reconstruction_target(self, X: np.ndarray) -> np.ndarray:
        span = self.recon_max - self.recon_min
        span = np.where(span > 0, span, 1.0)
        return np.clip((X - self.recon_min) / span, 0.0, 1.0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _as_batch(self, X)
        z, _, _ = _encode_batch(self, X)
        return softmax(z @ self.params["head_W"] + self.params["head_b"])

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def embed(self, X: np.ndarray) -> np.ndarray:
        return _encode_batch(self, _as_batch(self, X))[0]


def choose_geometry(n_features: int, embedding_dim: int, min_channels: int = 2,
                    max_channels: int = 8) -> tuple[int, int]:
    """Pick (channels, pool_size) so channels * ceil(M / pool) lands closest to the target K.

    Candidates must keep pool_size >= 2 and the embedding strictly below M.
    Ties go to fewer channels. At least two channels by default, so that
    max-pooling can keep both signs of a column.
    """
    if not 1 <= embedding_dim < n_features:
        raise ValueError("embedding_dim must lie in [1, n_features)")
    best = None
    for ch in range(min_channels, max_channels + 1):
        pool = max(2, math.ceil(ch * n_features / embedding_dim))
        K = ch * math.ceil(n_features / pool)
        if K >= n_features:
            continue
        score = abs(K - embedding_dim)
        if best is None or score < best[0]:
            best = (score, ch, pool)
    if best is None:
        raise ValueError("no valid geometry")
    return best[1], best[2]


def default_embedding_dim(n_features: int) -> int:
    return max(1, math.ceil(0.06 * n_features))


def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[-1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[-1]}")
    return X


def _same_pad(L):
    left = (L - 1) // 2
    return left, L - 1 - left


def _columns(A, L):
    """Sliding windows of length L over the last axis with 'same' zero padding."""
    left, right = _same_pad(L)
    pad = [(0, 0)] * (A.ndim - 1) + [(left, right)]
    return sliding_window_view(np.pad(A, pad), L, axis=-1)


def _encode_batch(model, X):
    W, b = model.params["enc_W"], model.params["enc_b"]
    B, M = X.shape
    P, Lp = model.pool_size, model.pooled_length
    cols = _columns(X * model.params["enc_g"], model.kernel_size)  # (B, M, L)
    a = np.einsum("bit,ct->bci", cols, W, optimize=True) + b[None, :, None]
    h = elu(a)
    padded = np.full((B, model.channels, Lp * P), -np.inf)
    padded[:, :, :M] = h
    windows = padded.reshape(B, model.channels, Lp, P)
    arg = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    positions = arg + (np.arange(Lp) * P)[None, None, :]
    z = pooled.reshape(B, model.embedding_dim)
    return z, PoolSwitches(positions), (cols, a)


def unpool(model, z, switches: PoolSwitches):
    B = z.shape[0]
    pooled = z.reshape(B, model.channels, model.pooled_length)
    pos = switches.positions
    if pos.shape != pooled.shape:
        raise ValueError("switches do not match the pooling geometry")
    if pos.min() < 0 or pos.max() >= model.n_features:
        raise ValueError("switch position outside the input range")
    u = np.zeros((B, model.channels, model.n_features))
    np.put_along_axis(u, pos, pooled, axis=-1)
    return u


def _decode_batch(model, z, switches):
    u = unpool(model, z, switches)
    ucols = _columns(u, model.kernel_size)  # (B, ch, M, L)
    s = np.einsum("bcjt,ct->bj", ucols, model.params["dec_W"], optimize=True) + model.params["dec_b"][0]
    return sigmoid(s), (u, ucols)


def encode(model, x):
    """Embed one M-vector; returns (z, switches)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("encode expects a single M-vector")
    z, switches, _ = _encode_batch(model, _as_batch(model, x))
    return z[0], PoolSwitches(switches.positions[0])


def decode(model, z, switches: PoolSwitches):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.embedding_dim,):
        raise ValueError(f"expected an embedding of length {model.embedding_dim}")
    x_prime, _ = _decode_batch(model, z[None, :], PoolSwitches(np.asarray(switches.positions)[None]))
    return x_prime[0]


def predict(model, x) -> Prediction:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict expects a single M-vector")
    z, _, _ = _encode_batch(model, _as_batch(model, x))
    probs = softmax(z @ model.params["head_W"] + model.params["head_b"])[0]
    return Prediction(probs, int(np.argmax(probs)), z[0])


def _one_hot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def loss_and_grads(model, X, y, config: TrainConfig, need_grads: bool = True):
    """Joint loss ``alpha_r * l_r + alpha_ce * l_ce`` and its parameter gradients.

    ``l_r`` is the element-wise mean squared reconstruction error against the
    rescaled target plus ``weight_decay * ||enc_W||^2`` plus
    ``gain_l1 * ||enc_g||_1``, a sparsity pull on the per-feature gains that
    silences columns the model does not use; ``l_ce`` is the mean
    categorical cross-entropy (for two classes this equals binary CE).
    """
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=np.int64)
    B, M = X.shape
    p = model.params
    target = model.reconstruction_target(X)

    z, switches, (xcols, a) = _encode_batch(model, X)
    logits = z @ p["head_W"] + p["head_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    l_ce = -log_probs[np.arange(B), y].mean()

    x_prime, (u, ucols) = _decode_batch(model, z, switches)
    resid = x_prime - target
    l_r = (
        np.mean(resid**2)
        + config.weight_decay * np.sum(p["enc_W"] ** 2)
        + config.gain_l1 * np.sum(np.abs(p["enc_g"]))
    )
    total = config.alpha_r * l_r + config.alpha_ce * l_ce
    if not need_grads:
        return total, l_r, l_ce, None

    grads = {}
    dlogits = (np.exp(log_probs) - _one_hot(y, model.n_classes)) * (config.alpha_ce / B)
    grads["head_W"] = z.T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dz = dlogits @ p["head_W"].T

    ds = config.alpha_r * 2.0 * resid / (B * M) * x_prime * (1.0 - x_prime)
    grads["dec_W"] = np.einsum("bj,bcjt->ct", ds, ucols, optimize=True)
    grads["dec_b"] = np.array([ds.sum()])
    # adjoint of the 'same' correlation: correlate ds with the flipped kernel
    L = model.kernel_size
    left, right = _same_pad(L)
    ds_cols = sliding_window_view(np.pad(ds, [(0, 0), (right, left)]), L, axis=-1)
    du = np.einsum("biq,cq->bci", ds_cols, p["dec_W"][:, ::-1], optimize=True)
    pos = switches.positions
    dz = dz + np.take_along_axis(du, pos, axis=-1).reshape(B, -1)

    dh = np.zeros((B, model.channels, M))
    np.put_along_axis(dh, pos, dz.reshape(pos.shape), axis=-1)
    da = dh * np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))
    grads["enc_W"] = np.einsum("bci,bit->ct", da, xcols, optimize=True) + (
        config.alpha_r * 2.0 * config.weight_decay * p["enc_W"]
    )
    grads["enc_b"] = da.sum(axis=(0, 2))
    da_cols = sliding_window_view(np.pad(da, [(0, 0), (0, 0), (right, left)]), L, axis=-1)
    dxg = np.einsum("bciq,cq->bi", da_cols, p["enc_W"][:, ::-1], optimize=True)
    grads["enc_g"] = (dxg * X).sum(axis=0) + config.alpha_r * config.gain_l1 * np.sign(p["enc_g"])
    return total, l_r, l_ce, grads


def joint_loss(model, X, y, config: TrainConfig):
    """Return (total, l_r, l_ce) on a batch."""
    if len(y) == 0:
        raise ValueError("empty batch")
    total, l_r, l_ce, _ = loss_and_grads(model, X, y, config, need_grads=False)
    return float(total), float(l_r), float(l_ce)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(dataset, config: TrainConfig = TrainConfig(), embedding_dim: int | None = None,
          kernel_size: int = 1, model: AutoencoderClassifier | None = None):
    """Fit the autoencoder-classifier; returns (model, history).

    ``history`` holds one ``{"epoch", "l_r", "l_ce", "total"}`` record per
    epoch, averaged over that epoch's mini-batches.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if model is None:
        K = embedding_dim or default_embedding_dim(X.shape[1])
        channels, pool = choose_geometry(X.shape[1], K)
        model = AutoencoderClassifier.initialize(
            X.shape[1], dataset.n_classes, channels, pool, kernel_size, seed=config.seed
        )
    else:
        model = model.copy()
    model.fit_reconstruction_range(X)

    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    N = len(y)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, N, config.batch_size):
            idx = order[start : start + config.batch_size]
            total, l_r, l_ce, grads = loss_and_grads(model, X[idx], y[idx], config)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}; try a lower learning rate")
            if config.alpha_ce == 0:
                grads.pop("head_W")
                grads.pop("head_b")
            opt.step(model.params, grads)
            sums += (l_r, l_ce, total)
            n_batches += 1
        l_r, l_ce, total = sums / n_batches
        history.append({"epoch": epoch, "l_r": float(l_r), "l_ce": float(l_ce), "total": float(total)})
    return model, history


def gradient_check(model, X, y, epsilon: float = 1e-6, config: TrainConfig | None = None,
                   n_params: int = 200, seed: int = 0, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_params`` parameter entries (all of them if fewer exist).
    Entries where both gradients are below 1e-12 count as zero error.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    config = config or TrainConfig()
    grad_fn = grad_fn or loss_and_grads
    model = model.copy()
    _, _, _, grads = grad_fn(model, X, y, config)

    slots = [(name, i) for name in PARAM_NAMES for i in range(model.params[name].size)]
    rng = np.random.default_rng(seed)
    if len(slots) > n_params:
        slots = [slots[i] for i in rng.choice(len(slots), size=n_params, replace=False)]

    worst = 0.0
    for name, i in slots:
        flat = model.params[name].reshape(-1)
        saved = flat[i]
        flat[i] = saved + epsilon
        plus = loss_and_grads(model, X, y, config, need_grads=False)[0]
        flat[i] = saved - epsilon
        minus = loss_and_grads(model, X, y, config, need_grads=False)[0]
        flat[i] = saved
        numeric = (plus - minus) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[i]
        denom = max(abs(numeric), abs(analytic))
        if denom < 1e-12:
            continue
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def save_checkpoint(model: AutoencoderClassifier, path, config: TrainConfig | None = None) -> Path:
    """JSON header next to a raw little-endian float64 parameter blob."""
    path = Path(path)
    blob_path = path.with_suffix(".f64")
    arrays = [model.params[name] for name in PARAM_NAMES] + [model.recon_min, model.recon_max]
    np.concatenate([a.reshape(-1) for a in arrays]).astype("<f8").tofile(blob_path)
    header = {
        "architecture": {
            "n_features": model.n_features,
            "n_classes": model.n_classes,
            "channels": model.channels,
            "pool_size": model.pool_size,
            "kernel_size": model.kernel_size,
            "embedding_dim": model.embedding_dim,
        },
        "layout": [[name, list(model.params[name].shape)] for name in PARAM_NAMES],
        "config": asdict(config) if config is not None else None,
        "blob": blob_path.name,
    }
    path.write_text(json.dumps(header, indent=1))
    return path


def load_checkpoint(path) -> AutoencoderClassifier:
    path = Path(path)
    header = json.loads(path.read_text())
    blob = np.fromfile(path.parent / header["blob"], dtype="<f8")
    arch = header["architecture"]
    params, offset = {}, 0
    for name, shape in header["layout"]:
        size = int(np.prod(shape))
        params[name] = blob[offset : offset + size].reshape(shape).copy()
        offset += size
    M = arch["n_features"]
    recon_min = blob[offset : offset + M].copy()
    recon_max = blob[offset + M : offset + 2 * M].copy()
    return AutoencoderClassifier(
        M, arch["n_classes"], arch["channels"], arch["pool_size"], arch["kernel_size"],
        params, recon_min, recon_max,
    )
