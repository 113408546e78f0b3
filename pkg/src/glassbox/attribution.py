"""Feature importance and impact: permutation importance, Shapley values, what-if."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXACT_LIMIT = 15


@dataclass(frozen=True)
class LocalImportance:
    features: np.ndarray
    values: np.ndarray  # in [0, 1]


@dataclass(frozen=True)
class LocalImpact:
    features: np.ndarray
    values: np.ndarray  # in [-1, 1]
    raw: np.ndarray


@dataclass(frozen=True)
class GlobalScores:
    """Per-feature global values with their descending ranking."""

    features: np.ndarray
    values: np.ndarray
    raw: np.ndarray | None = None

    @property
    def ranking(self) -> np.ndarray:
        order = np.lexsort((np.arange(len(self.values)), -self.values))
        return self.features[order]


GlobalImportance = GlobalScores
GlobalImpact = GlobalScores


def _proba_fn(model):
    if callable(getattr(model, "predict_proba", None)):
        return model.predict_proba
    if callable(model):
        return model
    raise TypeError("model must be callable or expose predict_proba")


def _labels(model, X):
    return np.argmax(_proba_fn(model)(X), axis=1)


class ColumnSubsetModel:
    """Adapter that feeds only ``columns`` of a full-width matrix to ``model``."""

    def __init__(self, model, columns):
        self.model = model
        self.columns = np.asarray(columns, dtype=np.int64)

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        return _proba_fn(self.model)(X[..., self.columns])


def permutation_importance(model, X, Y, n_repeats: int = 5, seed: int = 0) -> GlobalScores:
    """Accuracy drop when one column is shuffled, clipped at 0 and max-normalized."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    rng = np.random.default_rng(seed)
    baseline = np.mean(_labels(model, X) == Y)
    drops = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        total = 0.0
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, j] = X[rng.permutation(len(X)), j]
            total += baseline - np.mean(_labels(model, Xp) == Y)
        drops[j] = total / n_repeats
    raw = drops.copy()
    drops = np.clip(drops, 0.0, None)
    top = drops.max()
    values = drops / top if top > 0 else np.zeros_like(drops)
    return GlobalScores(np.arange(X.shape[1]), values, raw)


def _coalition_rows(x, base, feature_set, masks):
    rows = np.repeat(base[None, :], len(masks), axis=0)
    for bit, f in enumerate(feature_set):
        on = (masks >> bit) & 1 == 1
        rows[on, f] = x[f]
    return rows


def _target_class(f, x, target_class):
    if target_class is not None:
        return int(target_class)
    return int(np.argmax(f(x[None])[0]))


def shapley_exact(model, x, background, feature_set=None, target_class=None) -> np.ndarray:
    """Exact Shapley values by enumerating all coalitions of ``feature_set``.

    The payoff is the probability of ``target_class`` (default: the class
    the model predicts for ``x``). Features outside a coalition take the
    background column mean; features outside ``feature_set`` keep x's value.
    """
    f = _proba_fn(model)
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    feature_set = list(range(len(x))) if feature_set is None else [int(i) for i in feature_set]
    k = len(feature_set)
    if k > EXACT_LIMIT:
        raise ValueError(
            f"exact enumeration is limited to {EXACT_LIMIT} features; use shapley_sampled for {k}"
        )
    cls = _target_class(f, x, target_class)
    base = x.copy()
    base[feature_set] = background.mean(axis=0)[feature_set]
    masks = np.arange(2**k)
    values = f(_coalition_rows(x, base, feature_set, masks))[:, cls]

    sizes = np.array([bin(m).count("1") for m in masks])
    fact = [math.factorial(i) for i in range(k + 1)]
    phi = np.zeros(k)
    for i in range(k):
        without = masks[(masks >> i) & 1 == 0]
        s = sizes[without]
        weights = np.array([fact[a] * fact[k - a - 1] for a in s], dtype=np.float64) / fact[k]
        # fsum is order-independent, so exchangeable players get identical values
        phi[i] = math.fsum(weights * (values[without | (1 << i)] - values[without]))
    return phi


def shapley_sampled(model, x, background, feature_set=None, n_samples: int = 1000, seed: int = 0,
                    target_class=None) -> np.ndarray:
    """Monte-Carlo permutation estimate of the same Shapley values."""
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    f = _proba_fn(model)
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    feature_set = list(range(len(x))) if feature_set is None else [int(i) for i in feature_set]
    k = len(feature_set)
    cls = _target_class(f, x, target_class)
    base = x.copy()
    base[feature_set] = background.mean(axis=0)[feature_set]
    rng = np.random.default_rng(seed)
    cols = np.array(feature_set)

    phi = np.zeros(k)
    chunk = max(1, 20000 // (k + 1))
    for start in range(0, n_samples, chunk):
        n = min(chunk, n_samples - start)
        perms = np.array([rng.permutation(k) for _ in range(n)])
        rank = np.argsort(perms, axis=1)
        # row j of a permutation block has the first j permuted players switched on
        on = rank[:, None, :] < np.arange(k + 1)[None, :, None]
        rows = np.broadcast_to(base, (n, k + 1, len(base))).copy()
        rows[..., cols] = np.where(on, x[cols], base[cols])
        vals = f(rows.reshape(n * (k + 1), -1))[:, cls].reshape(n, k + 1)
        marg = np.diff(vals, axis=1)
        np.add.at(phi, perms.reshape(-1), marg.reshape(-1))
    return phi / n_samples


def shapley(model, x, background, feature_set=None, n_samples: int = 2000, seed: int = 0,
            target_class=None) -> np.ndarray:
    """Exact when the player set is small enough, sampled otherwise."""
    k = len(x) if feature_set is None else len(feature_set)
    if k <= EXACT_LIMIT:
        return shapley_exact(model, x, background, feature_set, target_class)
    return shapley_sampled(model, x, background, feature_set, n_samples, seed, target_class)


def impacts_from_shap(phi, features=None) -> LocalImpact:
    phi = np.asarray(phi, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(phi)))) if phi.size else 1.0
    features = np.arange(len(phi)) if features is None else np.asarray(features)
    return LocalImpact(features, phi / scale, phi)


def importance_from_shap(phi, features=None) -> LocalImportance:
    mag = np.abs(np.asarray(phi, dtype=np.float64))
    top = mag.max() if mag.size else 0.0
    features = np.arange(len(mag)) if features is None else np.asarray(features)
    return LocalImportance(features, mag / top if top > 0 else np.zeros_like(mag))


def global_mean_abs_shap(local_phis, features=None) -> GlobalScores:
    """Mean |phi| per feature over instances (rows of ``local_phis``)."""
    phis = np.atleast_2d(np.asarray(local_phis, dtype=np.float64))
    features = np.arange(phis.shape[1]) if features is None else np.asarray(features)
    return GlobalScores(features, np.mean(np.abs(phis), axis=0))


def global_mean(local_values, features=None) -> GlobalScores:
    vals = np.atleast_2d(np.asarray(local_values, dtype=np.float64))
    features = np.arange(vals.shape[1]) if features is None else np.asarray(features)
    return GlobalScores(features, vals.mean(axis=0))


def stacked_shap(models, x, background, feature_set=None, n_samples: int = 2000, seed: int = 0) -> np.ndarray:
    """Average of each model's Shapley vector."""
    return np.mean([shapley(m, x, background, feature_set, n_samples, seed) for m in models], axis=0)


def what_if_remove(model, x, feature: int, background):
    """Replace one feature by its background mean and re-predict.

    Returns (new_probs, delta, flipped) where delta = new - original.
    """
    f = _proba_fn(model)
    x = np.asarray(x, dtype=np.float64)
    before = f(x[None])[0]
    x_new = x.copy()
    x_new[feature] = np.asarray(background, dtype=np.float64)[:, feature].mean()
    after = f(x_new[None])[0]
    return after, after - before, bool(np.argmax(after) != np.argmax(before))
