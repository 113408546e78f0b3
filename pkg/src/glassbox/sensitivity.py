"""Perturbation-based validation of globally important features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .probe import FeatureRanking, descending_order

MODES = ("additive", "multiplicative")


@dataclass(frozen=True)
class PerturbationSpec:
    w: float = 1.0
    features: tuple[int, ...] = ()
    mode: str = "additive"

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w == 0:
            raise ValueError("w must be finite and non-zero")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.features) == 0:
            raise ValueError("features must be non-empty")
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))


@dataclass(frozen=True)
class SensitivityEntry:
    feature: int
    name: str
    sensitivity: float
    signed: float
    flip_rate: float
    top2_gap_before: float
    top2_gap_after: float


@dataclass(frozen=True)
class SensitivityReport:
    w: float
    mode: str
    entries: tuple[SensitivityEntry, ...]
    forward_passes: int

    @property
    def ranking(self) -> list[int]:
        return [e.feature for e in self.entries]

    def to_json(self) -> dict:
        return {
            "w": self.w,
            "mode": self.mode,
            "forward_passes": self.forward_passes,
            "entries": [
                {
                    "feature": e.feature,
                    "name": e.name,
                    "sensitivity": e.sensitivity,
                    "signed": e.signed,
                    "flip_rate": e.flip_rate,
                    "top2_gap_before": e.top2_gap_before,
                    "top2_gap_after": e.top2_gap_after,
                }
                for e in self.entries
            ],
        }


def w_perturb(x, feature: int, w: float, mode: str = "additive") -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    if not 0 <= feature < x.shape[-1]:
        raise IndexError(f"feature {feature} out of range for {x.shape[-1]} features")
    if mode == "additive":
        x[..., feature] += w
    elif mode == "multiplicative":
        x[..., feature] *= 1.0 + w
    else:
        raise ValueError(f"mode must be one of {MODES}")
    return x


def _prob_mse(probs, labels):
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean((probs - onehot) ** 2))


def _top2_gap(probs):
    if probs.shape[1] < 2:
        return np.zeros(len(probs))
    part = np.sort(probs, axis=1)
    return part[:, -1] - part[:, -2]


def sensitivity_global(model, dataset, spec: PerturbationSpec) -> SensitivityReport:
    """Per-feature |MSE(perturbed) - MSE(original)| of probability predictions.

    ``model`` needs ``predict_proba``. Costs N forward passes for the
    baseline plus N per listed feature.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels)
    base = model.predict_proba(X)
    base_mse = _prob_mse(base, y)
    base_label = base.argmax(axis=1)
    base_gap = float(_top2_gap(base).mean())
    passes = len(X)
    entries = []
    for f in spec.features:
        probs = model.predict_proba(w_perturb(X, f, spec.w, spec.mode))
        passes += len(X)
        signed = _prob_mse(probs, y) - base_mse
        entries.append(
            SensitivityEntry(
                feature=f,
                name=dataset.feature_names[f],
                sensitivity=abs(signed),
                signed=signed,
                flip_rate=float(np.mean(probs.argmax(axis=1) != base_label)),
                top2_gap_before=base_gap,
                top2_gap_after=float(_top2_gap(probs).mean()),
            )
        )
    entries.sort(key=lambda e: (-e.sensitivity, e.feature))
    return SensitivityReport(spec.w, spec.mode, tuple(entries), passes)


def full_sweep_spec(n_features: int, w: float = 1.0, mode: str = "additive") -> PerturbationSpec:
    """Every feature; N * M forward passes."""
    return PerturbationSpec(w, tuple(range(n_features)), mode)


def validated_ranking(ranking: FeatureRanking, report: SensitivityReport, k: int | None = None) -> FeatureRanking:
    """Re-rank the probed candidates by measured sensitivity.

    Features covered by ``report`` come first, ordered by sensitivity;
    the rest keep their attention order behind them. Scores are rebuilt as
    normalized reciprocal ranks so they stay a probability vector.
    """
    k = ranking.k if k is None else k
    tested = report.ranking
    seen = set(tested)
    order = tested + [int(i) for i in ranking.order if int(i) not in seen]
    M = len(ranking.input_scores)
    scores = np.empty(M)
    scores[np.array(order)] = 1.0 / np.arange(1, M + 1)
    scores /= scores.sum()
    return FeatureRanking(scores, descending_order(scores), k)
