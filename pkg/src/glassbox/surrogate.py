"""Tree surrogates (CART, random forest, extra-trees) on the top-k feature space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .parallel import pmap

KINDS = ("DT", "RF", "ERT")


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 2
    n_candidate_features: int | None = None  # None: ceil(sqrt(k)) for RF/ERT, all for DT
    bootstrap: bool = False
    random_thresholds: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_samples_leaf >= 1")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TreeParams":
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        base = {
            "DT": dict(n_trees=1, bootstrap=False, random_thresholds=False),
            "RF": dict(bootstrap=True, random_thresholds=False),
            "ERT": dict(bootstrap=False, random_thresholds=True),
        }[kind]
        return cls(**{**base, **overrides})


@dataclass(frozen=True)
class TreeNode:
    """View of one node; leaves carry class counts, internal nodes a split."""

    node_id: int
    feature: int = -1
    threshold: float = math.nan
    left: int = -1
    right: int = -1
    class_counts: np.ndarray | None = None
    distribution: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class Tree:
    """Flat preorder arrays. ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, C) training class counts
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def distribution(self, node: int) -> np.ndarray:
        c = self.counts[node]
        return c / c.sum()

    def node(self, i: int) -> TreeNode:
        if self.left[i] < 0:
            return TreeNode(i, class_counts=self.counts[i].copy(), distribution=self.distribution(i))
        return TreeNode(i, int(self.feature[i]), float(self.threshold[i]), int(self.left[i]), int(self.right[i]))

    def apply(self, X) -> np.ndarray:
        """Leaf id reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.left[node] >= 0
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        leaf = self.apply(X)
        c = self.counts[leaf]
        return c / c.sum(axis=1, keepdims=True)

    def to_json(self, i: int = 0) -> dict:
        if self.left[i] < 0:
            return {"counts": [int(c) for c in self.counts[i]]}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_json(int(self.left[i])),
            "right": self.to_json(int(self.right[i])),
        }

    @classmethod
    def from_json(cls, obj: dict, n_features: int) -> "Tree":
        feature, threshold, left, right, counts = [], [], [], [], []

        def visit(o):
            i = len(feature)
            for arr in (feature, threshold, left, right):
                arr.append(None)
            counts.append(None)
            if "counts" in o:
                feature[i], threshold[i], left[i], right[i] = -1, math.nan, -1, -1
                counts[i] = np.asarray(o["counts"], dtype=np.float64)
                return i, counts[i]
            feature[i], threshold[i] = o["feature"], o["threshold"]
            left[i], cl = visit(o["left"])
            right[i], cr = visit(o["right"])
            counts[i] = cl + cr
            return i, counts[i]

        visit(obj)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(counts),
            n_features,
        )


@dataclass
class SurrogateForest:
    kind: str
    trees: list
    params: TreeParams
    feature_subset: np.ndarray
    n_classes: int
    feature_names: tuple = field(default=())

    def predict_proba(self, X_star) -> np.ndarray:
        X_star = np.asarray(X_star, dtype=np.float64)
        single = X_star.ndim == 1
        if single:
            X_star = X_star[None]
        if X_star.shape[1] != len(self.feature_subset):
            raise ValueError(f"expected {len(self.feature_subset)} features, got {X_star.shape[1]}")
        probs = np.mean([t.predict_proba(X_star) for t in self.trees], axis=0)
        return probs[0] if single else probs

    def predict(self, X_star) -> np.ndarray:
        return np.argmax(self.predict_proba(X_star), axis=-1)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "params": asdict(self.params),
            "feature_subset": [int(f) for f in self.feature_subset],
            "feature_names": list(self.feature_names),
            "n_classes": self.n_classes,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SurrogateForest":
        k = len(obj["feature_subset"])
        return cls(
            obj["kind"],
            [Tree.from_json(t, k) for t in obj["trees"]],
            TreeParams(**obj["params"]),
            np.array(obj["feature_subset"], dtype=np.int64),
            obj["n_classes"],
            tuple(obj.get("feature_names", ())),
        )


@dataclass(frozen=True)
class SurrogateReport:
    kind: str
    r_squared: float
    agreement: float
    threshold: float = 0.9

    @property
    def verdict(self) -> str:
        return "replaceable" if self.r_squared >= self.threshold else "not_replaceable"

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "r_squared": self.r_squared,
            "agreement": self.agreement,
            "threshold": self.threshold,
            "verdict": self.verdict,
        }


def gini(class_counts) -> float:
    c = np.asarray(class_counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("Gini impurity of an empty node is undefined")
    p = c / total
    return float(np.sum(p * (1.0 - p)))


def _split_scores(values, y_onehot, msl):
    """Weighted Gini decrease for every midpoint split of one feature.

    Returns (thresholds, decreases) restricted to valid cut points, with
    thresholds ascending.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    n = len(v)
    left_counts = np.cumsum(y_onehot[order], axis=0)[:-1]
    total = left_counts[-1] + y_onehot[order[-1]] if n > 1 else y_onehot[order[0]]
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    valid = (v[:-1] < v[1:]) & (nl >= msl) & (nr >= msl)
    if not valid.any():
        return np.empty(0), np.empty(0)
    left_counts = left_counts[valid]
    right_counts = total - left_counts
    nl, nr = nl[valid], nr[valid]
    parent = n - np.sum(total**2) / n
    children = (nl - np.sum(left_counts**2, axis=1) / nl) + (nr - np.sum(right_counts**2, axis=1) / nr)
    lo, hi = v[:-1][valid], v[1:][valid]
    thr = (lo + hi) / 2.0
    thr = np.where(thr < hi, thr, lo)
    return thr, (parent - children) / n


def _random_split_score(values, y_onehot, msl, rng):
    lo, hi = values.min(), values.max()
    if not lo < hi:
        return None
    thr = rng.uniform(lo, hi)
    go_left = values <= thr
    nl = go_left.sum()
    nr = len(values) - nl
    if nl < msl or nr < msl:
        return None
    n = len(values)
    total = y_onehot.sum(axis=0)
    cl = y_onehot[go_left].sum(axis=0)
    cr = total - cl
    parent = n - np.sum(total**2) / n
    children = (nl - np.sum(cl**2) / nl) + (nr - np.sum(cr**2) / nr)
    return thr, (parent - children) / n


def best_split(X, y_onehot, features, msl, rng=None, random_thresholds=False, n_candidates=None):
    """Pick (feature, threshold, decrease) or None.

    Features are visited in the given order until ``n_candidates``
    non-constant ones have been scored. Ties go to the lower feature index,
    then the lower threshold.
    """
    best = None
    scored = 0
    limit = len(features) if n_candidates is None else n_candidates
    for f in features:
        if scored >= limit:
            break
        values = X[:, f]
        if values.min() == values.max():
            continue
        scored += 1
        if random_thresholds:
            res = _random_split_score(values, y_onehot, msl, rng)
            if res is None:
                continue
            cand = (res[1], int(f), res[0])
        else:
            thr, dec = _split_scores(values, y_onehot, msl)
            if len(dec) == 0:
                continue
            i = int(np.argmax(dec))
            cand = (dec[i], int(f), thr[i])
        if best is None or cand[0] > best[0] + 1e-12 or (
            abs(cand[0] - best[0]) <= 1e-12 and (cand[1], cand[2]) < (best[1], best[2])
        ):
            best = cand
    if best is None:
        return None
    return best[1], float(best[2]), float(best[0])


def fit_tree(X_star, Y, params: TreeParams = TreeParams.for_kind("DT"), n_classes: int | None = None,
             rng=None) -> Tree:
    """Greedy CART (or extra-tree when ``params.random_thresholds``)."""
    X = np.asarray(X_star, dtype=np.float64)
    y = np.asarray(Y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot fit a tree on no rows")
    C = n_classes or int(y.max()) + 1
    onehot = np.eye(C)[y]
    k = X.shape[1]
    n_cand = params.n_candidate_features
    if n_cand is None or n_cand >= k:
        n_cand = None
    rng = rng if rng is not None else np.random.default_rng(params.seed)

    feature, threshold, left, right, counts = [], [], [], [], []

    def grow(idx, depth):
        i = len(feature)
        c = onehot[idx].sum(axis=0)
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        if depth >= params.max_depth or len(idx) < 2 * params.min_samples_leaf or np.count_nonzero(c) <= 1:
            return i
        if n_cand is None and not params.random_thresholds:
            order = np.arange(k)
        else:
            order = rng.permutation(k)
        split = best_split(X[idx], onehot[idx], order, params.min_samples_leaf, rng,
                           params.random_thresholds, n_cand)
        if split is None:
            return i
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[i], threshold[i] = f, thr
        left[i] = grow(idx[mask], depth + 1)
        right[i] = grow(idx[~mask], depth + 1)
        return i

    grow(np.arange(len(X)), 0)
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.float64),
        k,
    )


def fit_forest(X_star, Y, params: TreeParams, kind: str, n_classes: int | None = None,
               feature_subset=None, feature_names=()) -> SurrogateForest:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    X = np.asarray(X_star, dtype=np.float64)
    y = np.asarray(Y, dtype=np.int64)
    C = n_classes or int(y.max()) + 1
    k = X.shape[1]
    if params.n_candidate_features is None and kind != "DT":
        params = replace(params, n_candidate_features=math.ceil(math.sqrt(k)))

    def grow(t):
        # each tree owns its generator, so thread scheduling cannot change results
        rng = np.random.default_rng([params.seed, t])
        if params.bootstrap:
            rows = rng.integers(0, len(X), size=len(X))
            return fit_tree(X[rows], y[rows], params, C, rng)
        return fit_tree(X, y, params, C, rng)

    trees = pmap(grow, range(params.n_trees))
    subset = np.arange(k) if feature_subset is None else np.asarray(feature_subset, dtype=np.int64)
    return SurrogateForest(kind, trees, params, subset, C, tuple(feature_names))


def predict_forest(forest: SurrogateForest, x_star):
    """(probabilities, label) for one instance; argmax ties go to the lower class."""
    probs = forest.predict_proba(np.asarray(x_star, dtype=np.float64))
    return probs, int(np.argmax(probs))


def tree_importance(tree: Tree) -> np.ndarray:
    imp = np.zeros(tree.n_features)
    n_root = tree.counts[0].sum()
    for i in np.flatnonzero(tree.left >= 0):
        l, r = tree.left[i], tree.right[i]
        n, nl, nr = tree.counts[i].sum(), tree.counts[l].sum(), tree.counts[r].sum()
        dec = gini(tree.counts[i]) - (nl / n) * gini(tree.counts[l]) - (nr / n) * gini(tree.counts[r])
        imp[tree.feature[i]] += (n / n_root) * dec
    return imp


def gini_importance(forest: SurrogateForest) -> np.ndarray:
    """Mean decrease in impurity per feature, normalized to sum to 1.

    Each tree's importances are normalized before averaging. A forest
    without any split returns the uniform vector.
    """
    k = len(forest.feature_subset)
    per_tree = []
    for tree in forest.trees:
        imp = tree_importance(tree)
        s = imp.sum()
        if s > 0:
            per_tree.append(imp / s)
    if not per_tree:
        return np.full(k, 1.0 / k)
    mean = np.mean(per_tree, axis=0)
    return mean / mean.sum()


def r_squared(surrogate_probs, blackbox_probs) -> float:
    """1 - SSE*/SSE over per-class probability vectors."""
    p_star = np.asarray(surrogate_probs, dtype=np.float64)
    p = np.asarray(blackbox_probs, dtype=np.float64)
    sse_star = float(np.sum((p_star - p) ** 2))
    sse = float(np.sum((p - p.mean(axis=0)) ** 2))
    if sse == 0.0:
        return 1.0 if sse_star == 0.0 else -math.inf
    return 1.0 - sse_star / sse


def surrogation_pipeline(blackbox, split, ranking, kind: str, params: TreeParams | None = None,
                         target: str = "truth", threshold: float = 0.9):
    """Fit a surrogate on the top-k columns and score it against the black-box.

    ``split`` is a train/test pair of full-feature datasets. The surrogate
    learns ground-truth labels by default (``target="blackbox"`` distils
    the black-box's predicted labels instead).
    """
    top = np.asarray(ranking.top, dtype=np.int64)
    M = split.train.n_features
    if len(top) > M:
        raise ValueError("ranking.k exceeds the number of features")
    params = params or TreeParams.for_kind(kind)
    X_train = split.train.features[:, top]
    if target == "truth":
        y_train = split.train.labels
    elif target == "blackbox":
        y_train = blackbox.predict_labels(split.train.features)
    else:
        raise ValueError("target must be 'truth' or 'blackbox'")
    names = tuple(split.train.feature_names[i] for i in top)
    forest = fit_forest(X_train, y_train, params, kind, split.train.n_classes, top, names)
    p_bb = blackbox.predict_proba(split.test.features)
    p_sur = forest.predict_proba(split.test.features[:, top])
    report = SurrogateReport(
        kind,
        r_squared(p_sur, p_bb),
        float(np.mean(p_sur.argmax(axis=1) == p_bb.argmax(axis=1))),
        threshold,
    )
    return forest, report
