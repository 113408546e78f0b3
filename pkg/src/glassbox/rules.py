"""Decision rules from surrogate trees, ordered rule lists and counterfactuals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .surrogate import SurrogateForest, Tree

CROSS_EPS = 1e-6


@dataclass(frozen=True)
class Predicate:
    feature: int
    name: str
    op: str  # "<=" or ">"
    threshold: float

    def __post_init__(self):
        if self.op not in ("<=", ">"):
            raise ValueError("op must be '<=' or '>'")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def holds(self, X) -> np.ndarray:
        col = np.asarray(X, dtype=np.float64)[..., self.feature]
        return col <= self.threshold if self.op == "<=" else col > self.threshold

    def complement(self) -> "Predicate":
        return replace(self, op=">" if self.op == "<=" else "<=")

    def text(self) -> str:
        sym = "≤" if self.op == "<=" else ">"
        return f"{self.name} {sym} {self.threshold:.6g}"


def simplify(predicates) -> tuple[Predicate, ...]:
    """Keep the tightest upper and lower bound per feature, in first-seen order."""
    upper: dict[int, Predicate] = {}
    lower: dict[int, Predicate] = {}
    order: list[tuple[int, str]] = []
    for p in predicates:
        key = (p.feature, p.op)
        if p.op == "<=":
            if p.feature not in upper:
                order.append(key)
            if p.feature not in upper or p.threshold < upper[p.feature].threshold:
                upper[p.feature] = p
        else:
            if p.feature not in lower:
                order.append(key)
            if p.feature not in lower or p.threshold > lower[p.feature].threshold:
                lower[p.feature] = p
    return tuple(upper[f] if op == "<=" else lower[f] for f, op in order)


@dataclass(frozen=True)
class DecisionRule:
    predicates: tuple[Predicate, ...]
    distribution: np.ndarray
    support: float = 0.0
    confidence: float = 0.0
    coverage: float = 0.0
    tree_id: int = 0
    leaf_id: int = 0

    @property
    def label(self) -> int:
        return int(np.argmax(self.distribution))

    def matches(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        mask = np.ones(len(X), dtype=bool)
        for p in self.predicates:
            mask &= p.holds(X)
        return mask

    def text(self, class_names=None) -> str:
        cond = " AND ".join(p.text() for p in self.predicates) or "TRUE"
        cls = class_names[self.label] if class_names else str(self.label)
        return f"IF {cond} THEN {cls} (conf {self.confidence:.3f}, supp {self.support:.3f})"

    def to_json(self) -> dict:
        return {
            "predicates": [
                {"feature": p.feature, "name": p.name, "op": p.op, "threshold": p.threshold}
                for p in self.predicates
            ],
            "class_distribution": [float(v) for v in self.distribution],
            "support": self.support,
            "confidence": self.confidence,
            "coverage": self.coverage,
            "tree_id": self.tree_id,
            "leaf_id": self.leaf_id,
        }

    @classmethod
    def from_json(cls, obj) -> "DecisionRule":
        preds = tuple(Predicate(p["feature"], p["name"], p["op"], p["threshold"]) for p in obj["predicates"])
        return cls(
            preds,
            np.asarray(obj["class_distribution"], dtype=np.float64),
            obj["support"],
            obj["confidence"],
            obj["coverage"],
            obj.get("tree_id", 0),
            obj.get("leaf_id", 0),
        )


def support(rule: DecisionRule, X_star) -> float:
    X = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    return float(rule.matches(X).mean()) if len(X) else 0.0


def coverage(rule: DecisionRule, X_star, Y) -> float:
    """Share of the rule's predicted class that the rule captures."""
    Y = np.asarray(Y)
    members = Y == rule.label
    if not members.any():
        return 0.0
    return float(np.mean(rule.matches(X_star)[members]))


def score_rule(rule: DecisionRule, X_star, Y) -> DecisionRule:
    return replace(
        rule,
        support=support(rule, X_star),
        confidence=float(np.max(rule.distribution)),
        coverage=coverage(rule, X_star, Y),
    )


def extract_paths(tree: Tree, X_star=None, Y=None, feature_names=None, tree_id: int = 0) -> list[DecisionRule]:
    """One rule per leaf, in preorder; scored on (X_star, Y) when given."""
    names = feature_names or [f"x{j}" for j in range(tree.n_features)]
    rules = []

    def walk(i, path):
        if tree.left[i] < 0:
            rule = DecisionRule(simplify(path), tree.distribution(i), tree_id=tree_id, leaf_id=int(i))
            if X_star is not None and Y is not None:
                rule = score_rule(rule, X_star, Y)
            else:
                rule = replace(rule, confidence=float(np.max(rule.distribution)))
            rules.append(rule)
            return
        f, t = int(tree.feature[i]), float(tree.threshold[i])
        walk(int(tree.left[i]), path + [Predicate(f, names[f], "<=", t)])
        walk(int(tree.right[i]), path + [Predicate(f, names[f], ">", t)])

    walk(0, [])
    return rules


def extract_forest_rules(forest: SurrogateForest, X_star, Y) -> list[DecisionRule]:
    names = list(forest.feature_names) or None
    rules = []
    for t, tree in enumerate(forest.trees):
        rules.extend(extract_paths(tree, X_star, Y, names, tree_id=t))
    return rules


@dataclass(frozen=True)
class RuleThresholds:
    min_support: float = 0.01
    min_confidence: float = 0.6
    min_coverage: float = 0.05


def filter_rules(rules, thresholds: RuleThresholds = RuleThresholds()) -> list[DecisionRule]:
    return [
        r
        for r in rules
        if r.support >= thresholds.min_support
        and r.confidence >= thresholds.min_confidence
        and r.coverage >= thresholds.min_coverage
    ]


@dataclass(frozen=True)
class RuleList:
    rules: tuple[DecisionRule, ...]
    default_distribution: np.ndarray

    @property
    def default_label(self) -> int:
        return int(np.argmax(self.default_distribution))

    def fired(self, X) -> np.ndarray:
        """Index of the first matching rule per row, -1 for the default rule."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(len(X), -1, dtype=np.int64)
        open_rows = np.ones(len(X), dtype=bool)
        for i, rule in enumerate(self.rules):
            hit = open_rows & rule.matches(X)
            out[hit] = i
            open_rows &= ~hit
        return out

    def predict(self, X) -> np.ndarray:
        idx = self.fired(X)
        labels = np.array([r.label for r in self.rules] + [self.default_label], dtype=np.int64)
        return labels[idx]

    def confidence(self, X) -> float:
        """Mean confidence of the fired rule (default rule: its majority share)."""
        idx = self.fired(X)
        conf = np.array([r.confidence for r in self.rules] + [float(np.max(self.default_distribution))])
        return float(conf[idx].mean())

    def to_json(self) -> dict:
        return {
            "rules": [r.to_json() for r in self.rules],
            "default": {"class_distribution": [float(v) for v in self.default_distribution]},
        }

    @classmethod
    def from_json(cls, obj) -> "RuleList":
        return cls(
            tuple(DecisionRule.from_json(r) for r in obj["rules"]),
            np.asarray(obj["default"]["class_distribution"], dtype=np.float64),
        )

    def text(self, class_names=None) -> list[str]:
        lines = [r.text(class_names) for r in self.rules]
        cls = class_names[self.default_label] if class_names else str(self.default_label)
        lines.append(f"ELSE {cls}")
        return lines


def _distribution(Y, n_classes):
    counts = np.bincount(np.asarray(Y, dtype=np.int64), minlength=n_classes).astype(np.float64)
    return counts / counts.sum() if counts.sum() else np.full(n_classes, 1.0 / n_classes)


def order_rule_list(rules, X_star, Y, thresholds: RuleThresholds = RuleThresholds(),
                    n_classes: int | None = None) -> RuleList:
    """Greedy sequential covering.

    Each round scores every candidate on the still-uncovered rows and
    appends the best by (confidence, support, fewer predicates, lower
    tree/leaf id). Rows it covers are removed. Stops when no candidate
    covers a new row while clearing the support and confidence thresholds.
    """
    X = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.int64)
    C = n_classes or (len(rules[0].distribution) if rules else int(Y.max()) + 1)
    N = len(X)
    masks = [r.matches(X) for r in rules]
    remaining = np.ones(N, dtype=bool)
    chosen: list[int] = []
    available = set(range(len(rules)))
    while available and remaining.any():
        best, best_key = None, None
        for i in sorted(available):
            covered = masks[i] & remaining
            n_cov = int(covered.sum())
            if n_cov == 0:
                continue
            conf = float(np.mean(Y[covered] == rules[i].label))
            supp = n_cov / N
            if conf < thresholds.min_confidence or supp < thresholds.min_support:
                continue
            key = (-conf, -supp, len(rules[i].predicates), rules[i].tree_id, rules[i].leaf_id)
            if best_key is None or key < best_key:
                best, best_key = i, key
        if best is None:
            break
        chosen.append(best)
        available.discard(best)
        remaining &= ~masks[best]
    residue = Y[remaining] if remaining.any() else Y
    return RuleList(tuple(rules[i] for i in chosen), _distribution(residue, C))


def fidelity(rule_list: RuleList, reference, X_star) -> float:
    """Agreement rate between the rule list and a reference model's labels."""
    X = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    if hasattr(reference, "predict"):
        ref = np.asarray(reference.predict(X))
    elif hasattr(reference, "predict_proba"):
        ref = np.argmax(reference.predict_proba(X), axis=1)
    else:
        ref = np.asarray(reference)
    return float(np.mean(rule_list.predict(X) == ref))


def forest_thresholds(forest) -> dict[int, np.ndarray]:
    """Sorted unique split thresholds per feature across all trees."""
    found: dict[int, list] = {}
    trees = forest.trees if isinstance(forest, SurrogateForest) else [forest]
    for tree in trees:
        for i in np.flatnonzero(tree.left >= 0):
            found.setdefault(int(tree.feature[i]), []).append(float(tree.threshold[i]))
    return {f: np.unique(v) for f, v in found.items()}


def _label_fn(model):
    if hasattr(model, "predict_proba"):
        return lambda X: np.argmax(model.predict_proba(np.atleast_2d(X)), axis=1)
    if hasattr(model, "predict"):
        return lambda X: np.asarray(model.predict(np.atleast_2d(X)))
    return lambda X: np.asarray(model(np.atleast_2d(X)))


def _proba_fn(model):
    if hasattr(model, "predict_proba"):
        return lambda X: model.predict_proba(np.atleast_2d(X))
    return None


@dataclass(frozen=True)
class CounterfactualResult:
    found: bool
    delta: np.ndarray
    x_prime: np.ndarray
    original_class: int
    new_class: int
    iterations: int

    def to_json(self, feature_names=None) -> dict:
        nz = np.flatnonzero(self.delta)
        return {
            "found": self.found,
            "original_class": self.original_class,
            "new_class": self.new_class,
            "l1": float(np.abs(self.delta).sum()),
            "changes": [
                {
                    "feature": int(j),
                    "name": feature_names[j] if feature_names else f"x{j}",
                    "delta": float(self.delta[j]),
                }
                for j in nz
            ],
        }


def _crossings(value, thr):
    """Values just past each threshold, seen from ``value``."""
    up = thr[thr >= value] + CROSS_EPS
    down = thr[thr < value] - CROSS_EPS
    return np.concatenate([down, up])


def counterfactual_search(model, x_star, target=None, step: float = 0.05, max_iter: int = 50,
                          thresholds: dict | None = None) -> CounterfactualResult:
    """Greedy single-feature moves until the label flips, then shrink.

    For tree models the candidate moves put one feature just past one of
    its split thresholds; otherwise each feature moves by +-``step``. Once
    a flip is found every changed coordinate is pulled back toward the
    original value as far as the flip survives.
    """
    label_of = _label_fn(model)
    proba_of = _proba_fn(model)
    x = np.asarray(x_star, dtype=np.float64)
    y = int(label_of(x)[0])
    if thresholds is None and isinstance(model, (SurrogateForest, Tree)):
        thresholds = forest_thresholds(model)

    def flipped(labels):
        return labels != y if target is None else labels == target

    if target is not None and y == target:
        return CounterfactualResult(True, np.zeros_like(x), x.copy(), y, y, 0)

    current = x.copy()
    found = False
    it = 0
    for it in range(1, max_iter + 1):
        cands, feats = [], []
        for j in range(len(x)):
            if thresholds is not None:
                vals = _crossings(current[j], thresholds.get(j, np.empty(0)))
            else:
                vals = np.array([current[j] - step, current[j] + step])
            for v in vals:
                c = current.copy()
                c[j] = v
                cands.append(c)
                feats.append(j)
        if not cands:
            break
        cands = np.array(cands)
        labels = label_of(cands)
        cost = np.abs(cands - x).sum(axis=1)
        hit = flipped(labels)
        if hit.any():
            i = np.flatnonzero(hit)[np.argmin(cost[hit])]
            current = cands[i]
            found = True
            break
        if proba_of is not None:
            p = proba_of(cands)
            progress = -p[:, y] if target is None else p[:, target]
        else:
            progress = np.zeros(len(cands))
        # most progress first, then the cheapest move
        i = np.lexsort((cost, -progress))[0]
        current = cands[i]

    if not found:
        return CounterfactualResult(False, current - x, current, y, int(label_of(current)[0]), it)

    current = _shrink(label_of, flipped, x, current, thresholds, step)
    return CounterfactualResult(True, current - x, current, y, int(label_of(current)[0]), it)


def _shrink(label_of, flipped, x, current, thresholds, step):
    improved = True
    while improved:
        improved = False
        for j in np.flatnonzero(current != x):
            lo, hi = sorted((x[j], current[j]))
            if thresholds is not None:
                thr = thresholds.get(int(j), np.empty(0))
                inner = thr[(thr > lo - CROSS_EPS) & (thr < hi + CROSS_EPS)]
                options = [x[j]] + list(_crossings(x[j], inner))
            else:
                n = int(round(abs(current[j] - x[j]) / step))
                options = [x[j] + np.sign(current[j] - x[j]) * step * s for s in range(n)]
            options = sorted(
                (v for v in options if abs(v - x[j]) < abs(current[j] - x[j]) - 1e-15),
                key=lambda v: abs(v - x[j]),
            )
            for v in options:
                c = current.copy()
                c[j] = v
                if flipped(label_of(c))[0]:
                    current = c
                    improved = True
                    break
    return current


def counterfactual_gradient(model, x, target=None, learning_rate: float = 0.05, l1: float = 0.01,
                            max_iter: int = 500, fd_eps: float = 1e-4) -> CounterfactualResult:
    """Adam on p_y(x + delta) + l1 * |delta|_1 with finite-difference gradients.

    Meant for smooth models such as the black-box network.
    """
    f = model.predict_proba
    x = np.asarray(x, dtype=np.float64)
    y = int(np.argmax(f(x[None])[0]))
    delta = np.zeros_like(x)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, max_iter + 1):
        cur = x + delta
        label = int(np.argmax(f(cur[None])[0]))
        if (target is None and label != y) or (target is not None and label == target):
            return CounterfactualResult(True, delta, cur, y, label, t)
        eye = np.eye(len(x)) * fd_eps
        probe = np.concatenate([cur + eye, cur - eye])
        p = f(probe)
        score = p[:, y] if target is None else -p[:, target]
        grad = (score[: len(x)] - score[len(x):]) / (2 * fd_eps) + l1 * np.sign(delta)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad**2
        delta -= learning_rate * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    cur = x + delta
    return CounterfactualResult(False, delta, cur, y, int(np.argmax(f(cur[None])[0])), max_iter)


@dataclass(frozen=True)
class CounterfactualRule:
    base_rule: int
    predicates: tuple[Predicate, ...]
    flipped_predicate: int
    delta: dict = field(default_factory=dict)
    original_class: int = 0
    flipped_class: int = 0

    def text(self, class_names=None) -> str:
        cond = " AND ".join(p.text() for p in self.predicates) or "TRUE"
        cls = class_names[self.flipped_class] if class_names else str(self.flipped_class)
        return f"IF {cond} THEN {cls}"

    def to_json(self) -> dict:
        return {
            "base_rule": self.base_rule,
            "flipped_predicate": self.flipped_predicate,
            "predicates": [
                {"feature": p.feature, "name": p.name, "op": p.op, "threshold": p.threshold}
                for p in self.predicates
            ],
            "delta": {str(k): v for k, v in self.delta.items()},
            "original_class": self.original_class,
            "flipped_class": self.flipped_class,
        }


def _witness(rule: DecisionRule, n_features: int) -> np.ndarray:
    """A point satisfying the rule's antecedent (0 where unconstrained)."""
    point = np.zeros(n_features)
    lo = {p.feature: p.threshold for p in rule.predicates if p.op == ">"}
    hi = {p.feature: p.threshold for p in rule.predicates if p.op == "<="}
    for f in set(lo) | set(hi):
        if f in lo and f in hi:
            point[f] = (lo[f] + hi[f]) / 2.0
        elif f in hi:
            point[f] = min(0.0, hi[f])
        else:
            point[f] = max(0.0, lo[f] + CROSS_EPS)
    return point


def counterfactual_rules(rule_index: int, rule_list: RuleList, x=None, n_features: int | None = None):
    """Flip one predicate of the fired rule at a time and keep outcome changes.

    The variant is evaluated on ``x`` moved just across the flipped
    predicate's threshold (a witness point of the rule when ``x`` is None).
    """
    if rule_index < 0:
        return []
    rule = rule_list.rules[rule_index]
    if x is None:
        dims = n_features or 1 + max((p.feature for p in rule.predicates), default=0)
        x = _witness(rule, dims)
    x = np.asarray(x, dtype=np.float64)
    original = int(rule_list.predict(x)[0])
    out = []
    for i, p in enumerate(rule.predicates):
        comp = p.complement()
        moved = x.copy()
        moved[p.feature] = p.threshold + CROSS_EPS if comp.op == ">" else p.threshold
        if not comp.holds(moved):
            continue
        new = int(rule_list.predict(moved)[0])
        if new == original:
            continue
        preds = tuple(comp if j == i else q for j, q in enumerate(rule.predicates))
        out.append(
            CounterfactualRule(
                rule_index,
                preds,
                i,
                {int(p.feature): float(moved[p.feature] - x[p.feature])},
                original,
                new,
            )
        )
    return out
