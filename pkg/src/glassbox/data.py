"""Dataset ingestion, standardization, splitting and synthetic generation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DataError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError("labels must have one entry per row")
        names = tuple(str(n) for n in self.feature_names)
        if len(names) != X.shape[1] or len(set(names)) != len(names):
            raise DataError("feature_names must hold exactly M unique entries")
        classes = tuple(str(c) for c in self.class_names)
        if y.min() < 0 or y.max() >= len(classes):
            raise DataError("every label must be a valid class index")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "class_names", classes)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.feature_names, self.class_names)

    def select_features(self, columns) -> "Dataset":
        columns = [int(c) for c in columns]
        return Dataset(
            self.features[:, columns],
            self.labels,
            tuple(self.feature_names[c] for c in columns),
            self.class_names,
        )

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, self.feature_names, self.class_names)


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    test: Dataset
    seed: int
    train_fraction: float
    train_index: np.ndarray = field(repr=False)
    test_index: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class StandardizationParams:
    means: np.ndarray
    stddevs: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        scale = np.where(self.stddevs > 0, self.stddevs, 1.0)
        center = np.where(self.stddevs > 0, self.means, 0.0)
        return (np.asarray(X, dtype=np.float64) - center) / scale

    def invert(self, Z: np.ndarray) -> np.ndarray:
        scale = np.where(self.stddevs > 0, self.stddevs, 1.0)
        center = np.where(self.stddevs > 0, self.means, 0.0)
        return np.asarray(Z, dtype=np.float64) * scale + center


def load_csv(path, label_column, has_header: bool = True) -> Dataset:
    """Read a numeric CSV file.

    ``label_column`` is a header name, or a column index when the file has
    no header. Labels are mapped to class indices in order of first
    appearance.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if has_header:
        if not rows:
            raise DataError("empty CSV file")
        header, rows = [h.strip() for h in rows[0]], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        header = [f"f{i}" for i in range(width)]
    if isinstance(label_column, str) and label_column in header:
        label_idx = header.index(label_column)
    elif not has_header and isinstance(label_column, (int, np.integer)) and 0 <= label_column < len(header):
        label_idx = int(label_column)
    elif not has_header and isinstance(label_column, str) and label_column.isdigit():
        label_idx = int(label_column)
    else:
        raise DataError(f"label column {label_column!r} not found")
    if not rows:
        raise DataError("CSV has no data rows")

    feature_cols = [i for i in range(len(header)) if i != label_idx]
    X = np.empty((len(rows), len(feature_cols)))
    raw_labels = []
    first_line = 2 if has_header else 1
    for r, row in enumerate(rows):
        line = r + first_line
        if len(row) != len(header):
            raise DataError(f"row {line}: expected {len(header)} cells, found {len(row)}")
        for j, c in enumerate(feature_cols):
            try:
                X[r, j] = float(row[c])
            except ValueError:
                raise DataError(
                    f"row {line}, column {header[c]!r}: cannot parse {row[c]!r} as a number"
                ) from None
        raw_labels.append(row[label_idx].strip())

    class_names: list[str] = []
    index = {}
    for lab in raw_labels:
        if lab not in index:
            index[lab] = len(class_names)
            class_names.append(lab)
    if len(class_names) < 2:
        raise DataError("need >= 2 classes")
    y = np.array([index[lab] for lab in raw_labels], dtype=np.int64)
    return Dataset(X, y, tuple(header[c] for c in feature_cols), tuple(class_names))


def standardize(train: Dataset, test: Dataset):
    if train.feature_names != test.feature_names:
        raise DataError("train and test must share feature names")
    params = StandardizationParams(train.features.mean(axis=0), train.features.std(axis=0))
    return (
        train.with_features(params.apply(train.features)),
        test.with_features(params.apply(test.features)),
        params,
    )


def make_synthetic(
    n: int,
    m_total: int,
    m_informative: int,
    c: int,
    seed: int,
    class_sep: float = 2.0,
) -> tuple[Dataset, np.ndarray]:
    """Gaussian blobs with a planted informative subset.

    Each class gets a mean on the informative columns drawn from the
    vertices of a hypercube with side ``class_sep``; distinct classes differ
    on at least one coordinate, so means are at least ``class_sep`` apart,
    and every informative column takes both values across the classes.
    Noise columns are independent standard normals. Informative columns are
    placed at random positions, returned sorted.
    """
    if n < c or m_total < 1 or c < 2:
        raise DataError("need n >= c, m_total >= 1 and c >= 2")
    if not 1 <= m_informative <= m_total:
        raise DataError("m_informative must lie in [1, m_total]")
    if c > 2**m_informative:
        raise DataError("too few informative columns to separate that many classes")
    if class_sep < 2.0:
        raise DataError("class_sep must be >= 2")

    rng = np.random.default_rng(seed)
    informative = np.sort(rng.choice(m_total, size=m_informative, replace=False))
    while True:
        if m_informative <= 20:
            codes = rng.choice(2**m_informative, size=c, replace=False)
            vertices = (codes[:, None] >> np.arange(m_informative)) & 1
        else:
            vertices = rng.integers(0, 2, size=(c, m_informative))
        # every informative column must separate some pair of classes
        constant = np.flatnonzero(vertices.min(axis=0) == vertices.max(axis=0))
        vertices[rng.integers(0, c, size=len(constant)), constant] ^= 1
        if len({tuple(v) for v in vertices.tolist()}) == c:
            break
    means = (vertices.astype(np.float64) - 0.5) * class_sep

    labels = np.arange(n) % c
    rng.shuffle(labels)
    X = rng.standard_normal((n, m_total))
    X[:, informative] += means[labels]
    names = tuple(f"f{j}" for j in range(m_total))
    classes = tuple(f"class_{k}" for k in range(c))
    return Dataset(X, labels, names, classes), informative


def train_test_split(d: Dataset, fraction: float, seed: int) -> SplitPair:
    if not 0.0 < fraction < 1.0:
        raise DataError("train fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_train_total = int(round(fraction * d.n_rows))
    if n_train_total <= 0 or n_train_total >= d.n_rows:
        raise DataError("a split would be empty")

    counts = np.bincount(d.labels, minlength=d.n_classes)
    stratified = counts[counts > 0].min() >= 2
    if stratified:
        train_idx, test_idx = [], []
        # largest-remainder allocation keeps the total exact
        quota = counts * fraction
        n_per = np.floor(quota).astype(int)
        order = np.argsort(-(quota - n_per), kind="stable")
        for k in order[: n_train_total - n_per.sum()]:
            n_per[k] += 1
        for k in range(d.n_classes):
            members = np.flatnonzero(d.labels == k)
            rng.shuffle(members)
            take = int(np.clip(n_per[k], 1, counts[k] - 1)) if counts[k] else 0
            train_idx.append(members[:take])
            test_idx.append(members[take:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        perm = rng.permutation(d.n_rows)
        train_idx = np.sort(perm[:n_train_total])
        test_idx = np.sort(perm[n_train_total:])
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DataError("a split would be empty")
    return SplitPair(d.subset(train_idx), d.subset(test_idx), seed, fraction, train_idx, test_idx)


def save_dataset(d: Dataset, directory, stem: str = "dataset", extra: dict | None = None) -> Path:
    """Write a JSON manifest plus a raw little-endian float64 matrix."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrix_path = directory / f"{stem}.f64"
    d.features.astype("<f8").tofile(matrix_path)
    manifest = {
        "shape": list(d.features.shape),
        "feature_names": list(d.feature_names),
        "class_names": list(d.class_names),
        "labels": d.labels.tolist(),
        "matrix": matrix_path.name,
        **(extra or {}),
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    X = np.fromfile(manifest_path.parent / manifest["matrix"], dtype="<f8").reshape(manifest["shape"])
    return Dataset(X, np.array(manifest["labels"]), tuple(manifest["feature_names"]), tuple(manifest["class_names"]))
