import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassbox import surrogate as sg
from glassbox.data import make_synthetic, train_test_split
from glassbox.probe import FeatureRanking


def exhaustive_root_split(X, y, C, msl=1):
    """Oracle: score every midpoint of every feature with the plain Gini formula."""
    n = len(y)
    parent = sg.gini(np.bincount(y, minlength=C))
    best = None
    for f in range(X.shape[1]):
        u = np.unique(X[:, f])
        for lo, hi in zip(u[:-1], u[1:]):
            thr = (lo + hi) / 2
            mask = X[:, f] <= thr
            nl, nr = mask.sum(), (~mask).sum()
            if nl < msl or nr < msl:
                continue
            dec = parent - nl / n * sg.gini(np.bincount(y[mask], minlength=C)) - nr / n * sg.gini(
                np.bincount(y[~mask], minlength=C)
            )
            if best is None or dec > best[0] + 1e-12:
                best = (dec, f, thr)
    return best


def random_dataset(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 201))
    k = int(rng.integers(1, 6))
    C = int(rng.integers(2, 5))
    # a coarse grid forces duplicate values and tied splits
    X = rng.integers(0, 8, size=(n, k)).astype(float) if seed % 2 else rng.normal(size=(n, k))
    y = rng.integers(0, C, n)
    return X, y, C


def test_gini_examples():
    assert sg.gini([5, 5]) == 0.5
    assert sg.gini([10, 0]) == 0.0
    assert sg.gini([1, 1, 1, 1]) == pytest.approx(4 * 0.25 * 0.75)
    with pytest.raises(ValueError):
        sg.gini([0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=6).filter(lambda c: sum(c) > 0))
def test_gini_bounds(counts):
    g = sg.gini(counts)
    assert 0 <= g <= 1 - 1 / len(counts) + 1e-12


def test_fit_tree_examples():
    t = sg.fit_tree([[0.0], [1.0]], [0, 1], sg.TreeParams.for_kind("DT", min_samples_leaf=1))
    assert t.threshold[0] == 0.5
    np.testing.assert_array_equal(t.predict_proba([[0.0], [1.0]]), [[1, 0], [0, 1]])

    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 3, dtype=float)
    y = np.array([0, 1, 1, 0] * 3)
    t = sg.fit_tree(X, y, sg.TreeParams.for_kind("DT", max_depth=2, min_samples_leaf=1))
    assert np.all(t.predict_proba(X).argmax(axis=1) == y)

    t = sg.fit_tree(np.random.default_rng(0).normal(size=(10, 3)), np.zeros(10, dtype=int), n_classes=2)
    assert t.n_nodes == 1


def test_fit_tree_tie_break_prefers_lower_feature():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 0, 1])
    t = sg.fit_tree(X, y, sg.TreeParams.for_kind("DT", min_samples_leaf=1))
    assert t.feature[0] == 0


@pytest.mark.parametrize("seed", range(20))
def test_root_split_matches_exhaustive_enumeration(seed):
    X, y, C = random_dataset(seed)
    tree = sg.fit_tree(X, y, sg.TreeParams.for_kind("DT", max_depth=1, min_samples_leaf=1), C)
    oracle = exhaustive_root_split(X, y, C)
    if oracle is None or oracle[0] <= 0 and tree.n_nodes == 1:
        return
    assert tree.n_nodes == 3
    assert (int(tree.feature[0]), tree.threshold[0]) == (oracle[1], pytest.approx(oracle[2], abs=1e-12))


@pytest.mark.parametrize("seed", range(5))
def test_leaves_partition_space(seed):
    X, y, C = random_dataset(seed)
    forest = sg.fit_forest(X, y, sg.TreeParams.for_kind("RF", n_trees=5, seed=seed), "RF", C)
    pts = np.random.default_rng(seed).uniform(-3, 9, size=(1000, X.shape[1]))
    for tree in forest.trees:
        leaves = tree.leaves
        for x in pts[:50]:
            claims = 0
            for leaf in leaves:
                # walk the root path of this leaf and test every predicate
                node, ok = 0, True
                path = _path_to(tree, leaf)
                for parent, went_left in path:
                    f, t = tree.feature[parent], tree.threshold[parent]
                    ok &= (x[f] <= t) if went_left else (x[f] > t)
                claims += ok
            assert claims == 1
        assert set(tree.apply(pts).tolist()) <= set(leaves.tolist())


def _path_to(tree, leaf):
    parents = {}
    for i in np.flatnonzero(tree.left >= 0):
        parents[int(tree.left[i])] = (int(i), True)
        parents[int(tree.right[i])] = (int(i), False)
    path, node = [], int(leaf)
    while node in parents:
        path.append(parents[node])
        node = parents[node][0]
    return path[::-1]


def test_degenerate_rf_equals_cart():
    X, y, C = random_dataset(3)
    cart = sg.fit_tree(X, y, sg.TreeParams.for_kind("DT"), C)
    rf = sg.fit_forest(X, y, sg.TreeParams.for_kind("RF", n_trees=1, bootstrap=False, n_candidate_features=X.shape[1]), "RF", C)
    t = rf.trees[0]
    np.testing.assert_array_equal(t.feature, cart.feature)
    np.testing.assert_array_equal(t.threshold, cart.threshold)
    np.testing.assert_array_equal(t.counts, cart.counts)


@pytest.mark.parametrize("kind", ["RF", "ERT"])
def test_forest_deterministic(kind, monkeypatch):
    X, y, C = random_dataset(4)
    p = sg.TreeParams.for_kind(kind, n_trees=8, seed=3)
    a = sg.fit_forest(X, y, p, kind, C)
    monkeypatch.setenv("GLASSBOX_THREADS", "1")
    b = sg.fit_forest(X, y, p, kind, C)
    assert a.to_json() == b.to_json()


def test_ert_thresholds_lie_in_observed_range():
    X, y, C = random_dataset(6)
    f = sg.fit_forest(X, y, sg.TreeParams.for_kind("ERT", n_trees=5), "ERT", C)
    for t in f.trees:
        for i in np.flatnonzero(t.left >= 0):
            col = X[:, t.feature[i]]
            assert col.min() <= t.threshold[i] <= col.max()


def test_rf_train_accuracy_close_to_dt():
    d, inf = make_synthetic(400, 20, 4, 3, seed=0, class_sep=3.0)
    X = d.features[:, inf]
    dt = sg.fit_tree(X, d.labels, sg.TreeParams.for_kind("DT"), 3)
    rf = sg.fit_forest(X, d.labels, sg.TreeParams.for_kind("RF", n_trees=30), "RF", 3)
    acc = lambda p: np.mean(p.argmax(axis=1) == d.labels)
    assert acc(rf.predict_proba(X)) >= acc(dt.predict_proba(X)) - 0.02


def test_predict_forest_examples():
    pure = sg.fit_tree([[0.0], [1.0]], [1, 1], n_classes=2)
    f = sg.SurrogateForest("DT", [pure], sg.TreeParams(), np.array([0]), 2)
    probs, label = sg.predict_forest(f, [0.3])
    np.testing.assert_array_equal(probs, [0.0, 1.0])
    assert label == 1
    a = sg.fit_tree([[0.0]], [0], n_classes=2)
    b = sg.fit_tree([[0.0]], [1], n_classes=2)
    f = sg.SurrogateForest("RF", [a, b], sg.TreeParams(), np.array([0]), 2)
    probs, label = sg.predict_forest(f, [5.0])
    np.testing.assert_array_equal(probs, [0.5, 0.5])
    assert label == 0
    with pytest.raises(ValueError):
        sg.predict_forest(f, [1.0, 2.0])


def test_gini_importance_examples():
    X = np.array([[0.0, 5.0], [1.0, 5.0], [0.0, 5.0], [1.0, 5.0]])
    f = sg.fit_forest(X, [0, 1, 0, 1], sg.TreeParams.for_kind("DT", min_samples_leaf=1), "DT", 2)
    np.testing.assert_array_equal(sg.gini_importance(f), [1.0, 0.0])
    stump = sg.fit_forest(X, [0, 0, 0, 0], sg.TreeParams.for_kind("DT"), "DT", 2)
    np.testing.assert_array_equal(sg.gini_importance(stump), [0.5, 0.5])


def test_tree_importance_oracle():
    X, y, C = random_dataset(8)
    t = sg.fit_tree(X, y, sg.TreeParams.for_kind("DT", max_depth=3), C)
    expect = np.zeros(X.shape[1])
    for i in np.flatnonzero(t.left >= 0):
        rows = np.isin(t.apply(X), _leaves_under(t, i))
        f, thr = t.feature[i], t.threshold[i]
        yy = y[rows]
        m = X[rows, f] <= thr
        dec = sg.gini(np.bincount(yy, minlength=C)) - m.mean() * sg.gini(
            np.bincount(yy[m], minlength=C)
        ) - (~m).mean() * sg.gini(np.bincount(yy[~m], minlength=C))
        expect[f] += rows.mean() * dec
    np.testing.assert_allclose(sg.tree_importance(t), expect, atol=1e-12)


def _leaves_under(t, i):
    if t.left[i] < 0:
        return [i]
    return _leaves_under(t, t.left[i]) + _leaves_under(t, t.right[i])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_gini_importance_sums_to_one(seed):
    X, y, C = random_dataset(seed)
    f = sg.fit_forest(X, y, sg.TreeParams.for_kind("RF", n_trees=5, seed=seed), "RF", C)
    imp = sg.gini_importance(f)
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(imp >= 0)


def test_r_squared_examples_and_oracle():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=20)
    assert sg.r_squared(p, p) == 1.0
    assert sg.r_squared(np.tile(p.mean(axis=0), (20, 1)), p) == pytest.approx(0.0, abs=1e-12)
    q = rng.dirichlet(np.ones(3), size=20)
    sse_star = sum((q[i, c] - p[i, c]) ** 2 for i in range(20) for c in range(3))
    mean = [sum(p[i, c] for i in range(20)) / 20 for c in range(3)]
    sse = sum((p[i, c] - mean[c]) ** 2 for i in range(20) for c in range(3))
    assert sg.r_squared(q, p) == pytest.approx(1 - sse_star / sse, abs=1e-12)


def test_forest_json_round_trip():
    X, y, C = random_dataset(9)
    f = sg.fit_forest(X, y, sg.TreeParams.for_kind("ERT", n_trees=4), "ERT", C, feature_subset=[3, 1, 4, 7, 2][: X.shape[1]])
    back = sg.SurrogateForest.from_json(f.to_json())
    np.testing.assert_array_equal(back.predict_proba(X), f.predict_proba(X))


def test_more_trees_reduce_prediction_variance():
    d, inf = make_synthetic(300, 10, 3, 3, seed=2, class_sep=2.0)
    X, y = d.features[:, :6], d.labels
    test = np.random.default_rng(0).normal(size=(200, 6))

    def spread(n_trees):
        preds = [
            sg.fit_forest(X, y, sg.TreeParams.for_kind("RF", n_trees=n_trees, seed=s), "RF", 3).predict_proba(test)
            for s in range(5)
        ]
        return np.var(np.stack(preds), axis=0).mean()

    assert spread(40) < spread(4)


class MeanModel:
    def __init__(self, fn):
        self.fn = fn

    def predict_proba(self, X):
        return self.fn(np.asarray(X))

    def predict_labels(self, X):
        return self.predict_proba(X).argmax(axis=1)


def test_surrogation_pipeline_on_planted_features():
    d, inf = make_synthetic(1000, 30, 4, 3, seed=5, class_sep=4.0)
    split = train_test_split(d, 0.8, 0)
    means = np.array([split.train.features[split.train.labels == c][:, inf].mean(axis=0) for c in range(3)])

    def bb(X):
        dist = ((X[:, None, inf] - means[None]) ** 2).sum(axis=-1)
        u = -dist / 2
        e = np.exp(u - u.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    scores = np.full(30, 0.01)
    scores[inf] = 1.0
    ranking = FeatureRanking.from_scores(scores, len(inf))
    forest, rep = sg.surrogation_pipeline(MeanModel(bb), split, ranking, "ERT")
    assert rep.r_squared >= 0.9
    assert rep.verdict == "replaceable"
    assert sorted(forest.feature_subset.tolist()) == sorted(inf.tolist())
    with pytest.raises(ValueError):
        sg.surrogation_pipeline(MeanModel(bb), split, ranking, "ERT", target="nope")


def test_params_validation():
    with pytest.raises(ValueError):
        sg.TreeParams(n_trees=0)
    with pytest.raises(ValueError):
        sg.TreeParams.for_kind("GBM")
    assert math.isclose(sg.SurrogateReport("ERT", 0.95, 1.0).r_squared, 0.95)
    assert sg.SurrogateReport("ERT", 0.85, 1.0).verdict == "not_replaceable"
