"""Local and global explanation objects and their JSON / markdown renderings.

A local explanation is the triple (importance, fired rule, counterfactual
rules) for one instance, plus signed impacts and what-if removals. A global
explanation pairs the top-k and bottom-k features of a primary ranking with
a per-method score table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attribution import impacts_from_shap, importance_from_shap, shapley, what_if_remove
from .probe import top_bottom_k
from .rules import (
    CounterfactualRule,
    DecisionRule,
    Predicate,
    RuleList,
    counterfactual_rules,
    counterfactual_search,
)

SCHEMA_VERSION = 1
METHODS = ("attention", "sensitivity", "gini", "stacked_shap")


@dataclass
class ExplainContext:
    """Everything a local explanation needs from a finished pipeline run.

    ``features`` are the input columns the surrogate and rule list consume,
    in surrogate column order; ``background`` holds full-width rows.
    """

    blackbox: object
    surrogate: object
    rule_list: RuleList
    features: np.ndarray
    background: np.ndarray
    feature_names: tuple
    class_names: tuple
    n_samples: int = 1000
    seed: int = 0


@dataclass
class LocalExplanation:
    instance_id: int | None
    x: np.ndarray  # values of the explained columns
    feature_names: tuple
    class_names: tuple
    blackbox_probs: np.ndarray
    surrogate_probs: np.ndarray
    fired_rule: int  # -1 means the default rule
    rule: DecisionRule | None
    importance: np.ndarray  # in [0, 1]
    impacts: np.ndarray  # in [-1, 1]
    shap: np.ndarray
    what_if: list = field(default_factory=list)
    counterfactual_rules: list = field(default_factory=list)
    counterfactual: dict | None = None

    @property
    def blackbox_label(self) -> int:
        return int(np.argmax(self.blackbox_probs))

    @property
    def surrogate_label(self) -> int:
        return int(np.argmax(self.surrogate_probs))

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "local",
            "instance_id": self.instance_id,
            "feature_names": list(self.feature_names),
            "class_names": list(self.class_names),
            "x": _floats(self.x),
            "prediction": {
                "blackbox": {"label": self.blackbox_label, "probs": _floats(self.blackbox_probs)},
                "surrogate": {"label": self.surrogate_label, "probs": _floats(self.surrogate_probs)},
            },
            "fired_rule": self.fired_rule,
            "rule": self.rule.to_json() if self.rule is not None else None,
            "importance": _floats(self.importance),
            "impacts": _floats(self.impacts),
            "shap": _floats(self.shap),
            "what_if": self.what_if,
            "counterfactual_rules": [c.to_json() for c in self.counterfactual_rules],
            "counterfactual": self.counterfactual,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LocalExplanation":
        pred = obj["prediction"]
        return cls(
            instance_id=obj["instance_id"],
            x=np.asarray(obj["x"], dtype=np.float64),
            feature_names=tuple(obj["feature_names"]),
            class_names=tuple(obj["class_names"]),
            blackbox_probs=np.asarray(pred["blackbox"]["probs"], dtype=np.float64),
            surrogate_probs=np.asarray(pred["surrogate"]["probs"], dtype=np.float64),
            fired_rule=int(obj["fired_rule"]),
            rule=DecisionRule.from_json(obj["rule"]) if obj["rule"] is not None else None,
            importance=np.asarray(obj["importance"], dtype=np.float64),
            impacts=np.asarray(obj["impacts"], dtype=np.float64),
            shap=np.asarray(obj["shap"], dtype=np.float64),
            what_if=obj["what_if"],
            counterfactual_rules=[_cf_rule_from_json(c) for c in obj["counterfactual_rules"]],
            counterfactual=obj["counterfactual"],
        )


@dataclass
class GlobalExplanation:
    features: np.ndarray  # input column indices covered by the table
    feature_names: tuple
    scores: dict  # method -> scores aligned with ``features``
    primary: str
    top_k: list  # (feature, score) pairs
    bottom_k: list
    importance: np.ndarray | None = None  # mean local importance
    impact: np.ndarray | None = None  # mean local impact
    surrogate: dict | None = None
    rule_list: dict | None = None

    def ranks(self, method: str) -> np.ndarray:
        """1-based rank of each feature under ``method`` (ties: lower column first)."""
        order = np.lexsort((self.features, -np.asarray(self.scores[method])))
        ranks = np.empty(len(order), dtype=np.int64)
        ranks[order] = np.arange(1, len(order) + 1)
        return ranks

    def to_json(self) -> dict:
        methods = sorted(self.scores)
        table = []
        for i, f in enumerate(self.features):
            row = {"feature": int(f), "name": self.feature_names[i]}
            for m in methods:
                row[m] = {"score": float(self.scores[m][i]), "rank": int(self.ranks(m)[i])}
            if self.importance is not None:
                row["global_importance"] = float(self.importance[i])
            if self.impact is not None:
                row["global_impact"] = float(self.impact[i])
            table.append(row)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "global",
            "primary": self.primary,
            "methods": methods,
            "top_k": [{"feature": int(f), "score": float(s)} for f, s in self.top_k],
            "bottom_k": [{"feature": int(f), "score": float(s)} for f, s in self.bottom_k],
            "table": table,
            "surrogate": self.surrogate,
            "rule_list": self.rule_list,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GlobalExplanation":
        table = obj["table"]
        scores = {m: np.array([row[m]["score"] for row in table]) for m in obj["methods"]}
        imp = [row.get("global_importance") for row in table]
        tbar = [row.get("global_impact") for row in table]
        return cls(
            features=np.array([row["feature"] for row in table], dtype=np.int64),
            feature_names=tuple(row["name"] for row in table),
            scores=scores,
            primary=obj["primary"],
            top_k=[(d["feature"], d["score"]) for d in obj["top_k"]],
            bottom_k=[(d["feature"], d["score"]) for d in obj["bottom_k"]],
            importance=None if None in imp else np.array(imp),
            impact=None if None in tbar else np.array(tbar),
            surrogate=obj["surrogate"],
            rule_list=obj["rule_list"],
        )


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def _cf_rule_from_json(obj) -> CounterfactualRule:
    preds = tuple(Predicate(p["feature"], p["name"], p["op"], p["threshold"]) for p in obj["predicates"])
    return CounterfactualRule(
        obj["base_rule"],
        preds,
        obj["flipped_predicate"],
        {int(k): v for k, v in obj["delta"].items()},
        obj["original_class"],
        obj["flipped_class"],
    )


def explain_instance(ctx: ExplainContext, x, instance_id: int | None = None) -> LocalExplanation:
    """Black-box and surrogate predictions, fired rule, Shapley impacts,
    counterfactual rules and what-if removals for one full-width row."""
    x = np.asarray(x, dtype=np.float64)
    M = ctx.background.shape[1]
    if x.shape != (M,):
        raise ValueError(f"instance must have {M} features, got shape {x.shape}")
    cols = np.asarray(ctx.features, dtype=np.int64)
    xs = x[cols]
    bg = ctx.background[:, cols]

    bb_probs = ctx.blackbox.predict_proba(x[None])[0]
    sur_probs = ctx.surrogate.predict_proba(xs[None])[0]
    fired = int(ctx.rule_list.fired(xs[None])[0])
    rule = ctx.rule_list.rules[fired] if fired >= 0 else None

    phi = shapley(ctx.surrogate, xs, bg, n_samples=ctx.n_samples, seed=ctx.seed)
    names = tuple(ctx.feature_names[c] for c in cols)
    what_if = []
    for j in range(len(cols)):
        _, delta, flipped = what_if_remove(ctx.surrogate, xs, j, bg)
        what_if.append({"feature": int(cols[j]), "name": names[j], "delta": _floats(delta), "flipped": flipped})

    cf = counterfactual_search(ctx.surrogate, xs)
    cf_json = cf.to_json(names) if cf.found else None
    if cf_json is not None:
        for change in cf_json["changes"]:
            change["feature"] = int(cols[change["feature"]])

    return LocalExplanation(
        instance_id=instance_id,
        x=xs,
        feature_names=names,
        class_names=tuple(ctx.class_names),
        blackbox_probs=bb_probs,
        surrogate_probs=sur_probs,
        fired_rule=fired,
        rule=rule,
        importance=importance_from_shap(phi).values,
        impacts=impacts_from_shap(phi).values,
        shap=phi,
        what_if=what_if,
        counterfactual_rules=counterfactual_rules(fired, ctx.rule_list, xs),
        counterfactual=cf_json,
    )


def explain_global(features, feature_names, scores: dict, primary: str = "stacked_shap", k: int = 5,
                   importance=None, impact=None, surrogate: dict | None = None,
                   rule_list: dict | None = None) -> GlobalExplanation:
    """Merge per-method scores over ``features`` and take top/bottom-k of ``primary``.

    Every method must score every listed feature.
    """
    features = np.asarray(features, dtype=np.int64)
    n = len(features)
    if len(feature_names) != n:
        raise ValueError("one name per feature")
    clean = {}
    for m, s in scores.items():
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (n,) or not np.all(np.isfinite(s)):
            raise ValueError(f"method {m!r} must give a finite score for every feature")
        clean[m] = s
    if primary not in clean:
        raise ValueError(f"primary ranking {primary!r} not among {sorted(clean)}")
    k = max(1, min(int(k), n))
    top, bottom = top_bottom_k(clean[primary], k)
    prim = clean[primary]
    return GlobalExplanation(
        features,
        tuple(feature_names),
        clean,
        primary,
        [(int(features[i]), float(prim[i])) for i in top],
        [(int(features[i]), float(prim[i])) for i in bottom],
        None if importance is None else np.asarray(importance, dtype=np.float64),
        None if impact is None else np.asarray(impact, dtype=np.float64),
        surrogate,
        rule_list,
    )


def dumps(obj) -> str:
    """Canonical JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def render_report(explanation, fmt: str = "json") -> str:
    if fmt == "json":
        return dumps(explanation.to_json())
    if fmt != "markdown":
        raise ValueError("format must be 'json' or 'markdown'")
    if isinstance(explanation, LocalExplanation):
        return _local_markdown(explanation)
    if isinstance(explanation, GlobalExplanation):
        return _global_markdown(explanation)
    raise TypeError("expected a LocalExplanation or GlobalExplanation")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _local_markdown(e: LocalExplanation) -> str:
    cn = list(e.class_names)
    title = "instance" if e.instance_id is None else f"instance {e.instance_id}"
    lines = [
        f"# Local explanation: {title}",
        "",
        f"- black-box prediction: {cn[e.blackbox_label]} (p = {_fmt(e.blackbox_probs[e.blackbox_label])})",
        f"- surrogate prediction: {cn[e.surrogate_label]} (p = {_fmt(e.surrogate_probs[e.surrogate_label])})",
        "",
        "## Fired rule",
        "",
    ]
    if e.rule is None:
        lines.append("default rule (no listed rule matches)")
    else:
        lines.append(f"`{e.rule.text(cn)}`")
        lines.append("")
        lines.append(
            f"support {_fmt(e.rule.support)}, confidence {_fmt(e.rule.confidence)}, coverage {_fmt(e.rule.coverage)}"
        )
    lines += [
        "",
        "## Feature contributions",
        "",
        "| feature | value | importance | impact | what-if flip |",
        "|---|---|---|---|---|",
    ]
    order = np.lexsort((np.arange(len(e.importance)), -e.importance))
    for j in order:
        flip = "yes" if e.what_if and e.what_if[j]["flipped"] else "no"
        lines.append(
            f"| {e.feature_names[j]} | {_fmt(e.x[j])} | {_fmt(e.importance[j])} | {_fmt(e.impacts[j])} | {flip} |"
        )
    lines += ["", "## Counterfactual rules", ""]
    if e.counterfactual_rules:
        lines += [f"- `{c.text(cn)}`" for c in e.counterfactual_rules]
    else:
        lines.append("no counterfactual found")
    lines += ["", "## Minimal change", ""]
    if e.counterfactual:
        for ch in e.counterfactual["changes"]:
            lines.append(f"- {ch['name']}: {ch['delta']:+.4g}")
        lines.append(f"- new class: {cn[e.counterfactual['new_class']]}")
    else:
        lines.append("no counterfactual found")
    return "\n".join(lines) + "\n"


def _global_markdown(g: GlobalExplanation) -> str:
    methods = sorted(g.scores)
    lines = [
        "# Global explanation",
        "",
        f"primary ranking: {g.primary}",
        "",
        "| feature | " + " | ".join(methods) + " |",
        "|---|" + "---|" * len(methods),
    ]
    order = np.lexsort((g.features, -g.scores[g.primary]))
    for i in order:
        cells = [f"{_fmt(g.scores[m][i])} (#{g.ranks(m)[i]})" for m in methods]
        lines.append(f"| {g.feature_names[i]} | " + " | ".join(cells) + " |")
    name_of = dict(zip((int(f) for f in g.features), g.feature_names))
    lines += [
        "",
        "top-k: " + ", ".join(name_of[f] for f, _ in g.top_k),
        "",
        "bottom-k: " + ", ".join(name_of[f] for f, _ in g.bottom_k),
    ]
    if g.rule_list and g.rule_list.get("text"):
        lines += ["", "## Rule list", ""]
        lines += [f"{i + 1}. `{t}`" for i, t in enumerate(g.rule_list["text"])]
    return "\n".join(lines) + "\n"
