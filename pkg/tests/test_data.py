import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glassbox.data import (
    DataError,
    Dataset,
    load_csv,
    load_dataset,
    make_synthetic,
    save_dataset,
    standardize,
    train_test_split,
)
from glassbox.surrogate import TreeParams, fit_tree


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_basic(tmp_path):
    p = _write(tmp_path, "x1,x2,label\n1,2,a\n3,4,b\n5,6,a\n7,8,b\n")
    d = load_csv(p, "label")
    assert (d.n_rows, d.n_features, d.n_classes) == (4, 2, 2)
    assert d.class_names == ("a", "b")
    assert d.labels.tolist() == [0, 1, 0, 1]
    assert d.feature_names == ("x1", "x2")


def test_load_csv_first_appearance_order(tmp_path):
    p = _write(tmp_path, "label,x\nz,1\ny,2\nz,3\n")
    d = load_csv(p, "label")
    assert d.class_names == ("z", "y")


def test_load_csv_bad_cell_names_row(tmp_path):
    # header is row 1, so the second data row is row 3
    p = _write(tmp_path, "x1,x2,label\n1,2,a\n3,x,b\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p, "label")


def test_load_csv_single_class(tmp_path):
    p = _write(tmp_path, "x,label\n1,a\n2,a\n")
    with pytest.raises(DataError, match="need >= 2 classes"):
        load_csv(p, "label")


def test_load_csv_missing_file_and_column(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "nope.csv", "label")
    p = _write(tmp_path, "x,y\n1,a\n2,b\n")
    with pytest.raises(DataError, match="not found"):
        load_csv(p, "label")


def test_load_csv_without_header(tmp_path):
    p = _write(tmp_path, "1,2,a\n3,4,b\n")
    d = load_csv(p, 2, has_header=False)
    assert d.n_features == 2 and d.class_names == ("a", "b")


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 1], ("a", "a"), ("p", "q"))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 2], ("a", "b"), ("p", "q"))
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 2)), [], ("a", "b"), ("p", "q"))


def _ds(X, y=None):
    X = np.asarray(X, dtype=float)
    y = np.zeros(len(X), dtype=int) if y is None else np.asarray(y)
    y = y.copy()
    y[-1] = 1
    return Dataset(X, y, tuple(f"f{i}" for i in range(X.shape[1])), ("a", "b"))


def test_standardize_known_values():
    train = _ds([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    test = _ds([[2.0, 5.0], [0.0, 7.0]])
    tr, te, params = standardize(train, test)
    # population std of [1,2,3] is sqrt(2/3)
    expect = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(tr.features[:, 0], expect, atol=1e-12)
    np.testing.assert_allclose(tr.features[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
    np.testing.assert_array_equal(tr.features[:, 1], [5.0, 5.0, 5.0])
    assert te.features[0, 0] == 0.0
    assert te.features[1, 1] == 7.0
    assert params.stddevs[1] == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
def test_standardize_round_trip(X):
    d = _ds(X)
    tr, _, params = standardize(d, d)
    np.testing.assert_allclose(params.invert(tr.features), X, atol=1e-9)
    sd = X.std(axis=0)
    for j in range(3):
        if sd[j] > 1e-6:
            assert abs(tr.features[:, j].mean()) < 1e-9
            assert abs(tr.features[:, j].std() - 1) < 1e-9


def test_synthetic_deterministic():
    a, ia = make_synthetic(200, 10, 2, 2, seed=7)
    b, ib = make_synthetic(200, 10, 2, 2, seed=7)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(ia, ib)


def test_synthetic_all_informative():
    _, inf = make_synthetic(50, 6, 6, 3, seed=1)
    assert inf.tolist() == list(range(6))


def test_synthetic_rejects_bad_params():
    with pytest.raises(DataError):
        make_synthetic(50, 5, 6, 2, seed=0)
    with pytest.raises(DataError):
        make_synthetic(50, 5, 2, 1, seed=0)
    with pytest.raises(DataError):
        make_synthetic(50, 5, 2, 2, seed=0, class_sep=1.0)


def test_synthetic_depth3_tree_on_informative_columns():
    d, inf = make_synthetic(400, 20, 3, 2, seed=3)
    X = d.features[:, inf]
    tree = fit_tree(X, d.labels, TreeParams.for_kind("DT", max_depth=3), 2)
    acc = np.mean(tree.predict_proba(X).argmax(axis=1) == d.labels)
    assert acc >= 0.9


def test_synthetic_class_means_separated():
    # class means on the informative block differ by >= 2 on some coordinate
    d, inf = make_synthetic(4000, 8, 4, 4, seed=2)
    means = np.array([d.features[d.labels == k][:, inf].mean(axis=0) for k in range(4)])
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.max(np.abs(means[a] - means[b])) > 1.8


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_synthetic_noise_columns_carry_no_class_signal(seed):
    # per-class means of every noise column stay within 5 standard errors of 0
    d, inf = make_synthetic(2000, 12, 3, 2, seed=seed)
    noise = np.setdiff1d(np.arange(12), inf)
    for k in range(2):
        rows = d.features[d.labels == k][:, noise]
        assert np.all(np.abs(rows.mean(axis=0)) < 5 / np.sqrt(len(rows)))


def test_split_sizes_and_determinism():
    d, _ = make_synthetic(10, 3, 1, 2, seed=0)
    s1 = train_test_split(d, 0.8, seed=4)
    s2 = train_test_split(d, 0.8, seed=4)
    assert (s1.train.n_rows, s1.test.n_rows) == (8, 2)
    np.testing.assert_array_equal(s1.train_index, s2.train_index)


def test_split_stratified():
    X = np.arange(200, dtype=float).reshape(100, 2)
    y = np.repeat([0, 1], 50)
    d = Dataset(X, y, ("a", "b"), ("p", "q"))
    s = train_test_split(d, 0.8, seed=1)
    for part in (s.train, s.test):
        counts = np.bincount(part.labels, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 80), st.floats(0.1, 0.9), st.integers(0, 1000))
def test_split_partitions_rows(n, frac, seed):
    d, _ = make_synthetic(n, 3, 1, 2, seed=seed)
    try:
        s = train_test_split(d, frac, seed)
    except DataError:
        return
    both = np.concatenate([s.train_index, s.test_index])
    assert sorted(both.tolist()) == list(range(n))
    assert s.train.feature_names == s.test.feature_names


def test_split_errors():
    d, _ = make_synthetic(10, 3, 1, 2, seed=0)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(DataError):
            train_test_split(d, bad, 0)
    with pytest.raises(DataError, match="empty"):
        train_test_split(d, 0.01, 0)


def test_dataset_serialization_round_trip(tmp_path):
    d, _ = make_synthetic(30, 5, 2, 3, seed=9)
    path = save_dataset(d, tmp_path, "x")
    back = load_dataset(path)
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert back.feature_names == d.feature_names and back.class_names == d.class_names
    raw = np.fromfile(tmp_path / "x.f64", dtype="<f8")
    assert raw.size == 30 * 5
