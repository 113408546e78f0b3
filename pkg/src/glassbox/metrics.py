"""Classification metrics and curve data (confusion matrix, calibration bins, lift)."""

from __future__ import annotations

import csv
import io
import math

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = actual class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal length")
    if len(y_true) and (max(y_true.max(), y_pred.max()) >= n_classes or min(y_true.min(), y_pred.min()) < 0):
        raise ValueError("labels must lie in [0, n_classes)")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b != 0)


def metrics_from_confusion(cm) -> dict:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * precision * recall, precision + recall)

    # multiclass (covariance form) MCC
    n = cm.sum()
    c = tp.sum()
    cov_ytyp = c * n - np.dot(predicted, actual)
    cov_ypyp = n * n - np.dot(predicted, predicted)
    cov_ytyt = n * n - np.dot(actual, actual)
    denom = math.sqrt(cov_ypyp * cov_ytyt)
    mcc = cov_ytyp / denom if denom > 0 else 0.0
    return {
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "mcc": float(mcc),
        "accuracy": float(c / n) if n else 0.0,
        "averaging": "macro",
    }


def classification_metrics(y_true, y_pred, n_classes: int) -> dict:
    """Macro precision/recall/F1 (0 for empty denominators) and multiclass MCC."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    out = metrics_from_confusion(cm)
    out["confusion_matrix"] = cm.tolist()
    return out


def calibration_bins(y_true_binary, scores, n_bins: int = 10) -> list[dict]:
    """Equal-width bins on [0, 1]; a score of exactly 1 falls in the top bin."""
    y = np.asarray(y_true_binary, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    idx = np.clip(np.floor(s * n_bins).astype(np.int64), 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        out.append(
            {
                "bin": b,
                "lower": b / n_bins,
                "upper": (b + 1) / n_bins,
                "mean_score": float(s[sel].mean()) if count else 0.0,
                "fraction_positive": float(y[sel].mean()) if count else 0.0,
                "count": count,
            }
        )
    return out


def lift_curve(y_true_binary, scores, cutoffs) -> list[dict]:
    """Rows scoring >= cutoff are selected; lift = precision of the selection / base rate."""
    y = np.asarray(y_true_binary, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    base = y.mean()
    total_pos = y.sum()
    out = []
    for c in cutoffs:
        sel = s >= c
        n_sel = int(sel.sum())
        precision = y[sel].mean() if n_sel else 0.0
        out.append(
            {
                "cutoff": float(c),
                "selected_fraction": n_sel / len(y),
                "captured_fraction": float(y[sel].sum() / total_pos) if total_pos else 0.0,
                "lift": float(precision / base) if base > 0 else 0.0,
            }
        )
    return out


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
