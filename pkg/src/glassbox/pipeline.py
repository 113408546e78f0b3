"""Stage runner: ingest through metrics, with hash-keyed artifact caching.

Each stage writes ``<stage>.json`` into the output directory. The file
carries a ``cache_key`` built from the stage's config subtree, the seed and
the SHA-256 of every upstream artifact, so a stage is re-executed exactly
when something it depends on changed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import blackbox as bb
from . import metrics as mt
from . import probe as pr
from . import rules as rl
from . import sensitivity as se
from . import surrogate as sg
from .config import config_hash
from .data import (
    Dataset,
    SplitPair,
    load_csv,
    load_dataset,
    make_synthetic,
    save_dataset,
    standardize,
    train_test_split,
)
from .explain import ExplainContext, GlobalExplanation, dumps, explain_global, explain_instance, render_report

STAGES = (
    "ingest",
    "blackbox",
    "probe",
    "sensitivity",
    "surrogate",
    "attribution",
    "rules",
    "explanations",
    "metrics",
)

DEPENDS = {
    "ingest": (),
    "blackbox": ("ingest",),
    "probe": ("ingest", "blackbox"),
    "sensitivity": ("ingest", "blackbox", "probe"),
    "surrogate": ("ingest", "blackbox", "sensitivity"),
    "attribution": ("ingest", "surrogate"),
    "rules": ("ingest", "surrogate"),
    "explanations": ("ingest", "blackbox", "sensitivity", "surrogate", "attribution", "rules"),
    "metrics": ("ingest", "blackbox", "probe", "surrogate", "rules"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def stage_config(cfg: dict, stage: str) -> dict:
    """The config subtree a stage's output depends on."""
    sub = {
        "ingest": {"data": cfg["data"]},
        "blackbox": {"blackbox": cfg["blackbox"]},
        "probe": {"probe": cfg["probe"]},
        "sensitivity": {"sensitivity": cfg["sensitivity"], "top_k": cfg["top_k"]},
        "surrogate": {"surrogate": cfg["surrogate"]},
        "attribution": {"attribution": cfg["attribution"]},
        "rules": {"rules": cfg["rules"]},
        "explanations": {"explain": cfg["explain"], "attribution": cfg["attribution"]},
        "metrics": {"metrics": cfg["metrics"]},
    }[stage]
    return {**sub, "seed": cfg["seed"]}


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class State:
    """In-memory products of finished stages."""

    cfg: dict
    out: Path
    split: SplitPair | None = None
    informative: list | None = None
    blackbox: object = None
    attention_scores: np.ndarray | None = None
    ranking: pr.FeatureRanking | None = None
    sensitivity: se.SensitivityReport | None = None
    forests: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    attribution: dict | None = None
    rule_list: rl.RuleList | None = None
    global_explanation: GlobalExplanation | None = None
    artifacts: dict = field(default_factory=dict)

    @property
    def features(self) -> np.ndarray:
        return np.asarray(self.ranking.top, dtype=np.int64)

    @property
    def primary(self):
        return self.forests[self.cfg["surrogate"]["primary"]]


def _write(path: Path, obj: dict):
    path.write_text(dumps(obj))


# ---------------------------------------------------------------- stages


def _run_ingest(st: State) -> dict:
    cfg, data = st.cfg, st.cfg["data"]
    seed = cfg["seed"]
    informative = None
    if data["source"] == "csv":
        c = data["csv"]
        d = load_csv(c["path"], c["label_column"], c["has_header"])
    else:
        s = data["synthetic"]
        d, inf = make_synthetic(
            s["n"], s["m_total"], s["m_informative"], s["n_classes"], seed, class_sep=float(s["class_sep"])
        )
        informative = [int(i) for i in inf]
    if cfg["top_k"] > d.n_features:
        raise ValueError(f"top_k={cfg['top_k']} exceeds the {d.n_features} features")
    split = train_test_split(d, float(data["train_fraction"]), seed)
    train, test, params = standardize(split.train, split.test)
    save_dataset(train, st.out, "train")
    save_dataset(test, st.out, "test")
    st.split = SplitPair(train, test, seed, split.train_fraction, split.train_index, split.test_index)
    st.informative = informative
    return {
        "n_rows": d.n_rows,
        "n_features": d.n_features,
        "n_classes": d.n_classes,
        "class_names": list(d.class_names),
        "train_rows": train.n_rows,
        "test_rows": test.n_rows,
        "train_index": [int(i) for i in split.train_index],
        "test_index": [int(i) for i in split.test_index],
        "standardization": {"means": [float(v) for v in params.means], "stddevs": [float(v) for v in params.stddevs]},
        "informative": informative,
        "files": {"train": "train.json", "test": "test.json"},
    }


def _load_ingest(st: State, art: dict):
    train = load_dataset(st.out / art["files"]["train"])
    test = load_dataset(st.out / art["files"]["test"])
    st.split = SplitPair(
        train, test, st.cfg["seed"], float(st.cfg["data"]["train_fraction"]),
        np.asarray(art["train_index"]), np.asarray(art["test_index"]),
    )
    st.informative = art["informative"]


def _accuracy(labels, truth) -> float:
    return float(np.mean(np.asarray(labels) == np.asarray(truth)))


def _run_blackbox(st: State) -> dict:
    c = st.cfg["blackbox"]
    config = bb.TrainConfig(
        alpha_r=float(c["alpha_r"]),
        alpha_ce=float(c["alpha_ce"]),
        weight_decay=float(c["weight_decay"]),
        gain_l1=float(c["gain_l1"]),
        learning_rate=float(c["learning_rate"]),
        epochs=c["epochs"],
        batch_size=c["batch_size"],
        seed=st.cfg["seed"],
    )
    model, history = bb.train(st.split.train, config, c["embedding_dim"], c["kernel_size"])
    bb.save_checkpoint(model, st.out / "blackbox_model.json", config)
    st.blackbox = model
    return {
        "checkpoint": "blackbox_model.json",
        "embedding_dim": model.embedding_dim,
        "channels": model.channels,
        "pool_size": model.pool_size,
        "history": history,
        "train_accuracy": _accuracy(model.predict_labels(st.split.train.features), st.split.train.labels),
        "test_accuracy": _accuracy(model.predict_labels(st.split.test.features), st.split.test.labels),
    }


def _load_blackbox(st: State, art: dict):
    st.blackbox = bb.load_checkpoint(st.out / art["checkpoint"])


def _run_probe(st: State) -> dict:
    c = st.cfg["probe"]
    config = pr.ProbeConfig(
        mode=c["mode"],
        k_heads=c["k_heads"],
        hidden=c["hidden"],
        learning_rate=float(c["learning_rate"]),
        epochs=c["epochs"],
        batch_size=c["batch_size"],
        seed=st.cfg["seed"],
    )
    probe, history = pr.train_probe(st.blackbox, st.split.train, config=config)
    summary = pr.extract_attention(probe)
    scores = pr.project_to_inputs(summary, st.blackbox)
    st.attention_scores = scores

    def acc(d: Dataset):
        V = pr.attended_inputs(st.blackbox, d.features, config.mode)
        return _accuracy(pr.probe_predict_proba(probe, V).argmax(axis=1), d.labels)

    return {
        "mode": config.mode,
        "k_heads": config.k_heads,
        "history": history,
        "train_accuracy": acc(st.split.train),
        "test_accuracy": acc(st.split.test),
        "r_l": [float(f"{v:.12g}") for v in summary.r_l],
        "input_scores": [float(f"{v:.12g}") for v in scores],
        "order": [int(i) for i in pr.descending_order(scores)],
    }


def _load_probe(st: State, art: dict):
    st.attention_scores = np.asarray(art["input_scores"], dtype=np.float64)


def _run_sensitivity(st: State) -> dict:
    c = st.cfg["sensitivity"]
    ranking = pr.FeatureRanking.from_scores(pr.selection_scores(st.attention_scores, c["selection"]), st.cfg["top_k"])
    spec = se.PerturbationSpec(float(c["w"]), tuple(int(i) for i in ranking.top), c["mode"])
    report = se.sensitivity_global(st.blackbox, st.split.train, spec)
    st.sensitivity = report
    st.ranking = se.validated_ranking(ranking, report)
    mode = st.cfg["probe"]["mode"]
    return {
        "report": report.to_json(),
        "attention_ranking": ranking.to_json(mode),
        "validated_ranking": st.ranking.to_json(mode),
        "top_k": [int(i) for i in st.ranking.top],
    }


def _load_sensitivity(st: State, art: dict):
    r = art["report"]
    entries = tuple(se.SensitivityEntry(**e) for e in r["entries"])
    st.sensitivity = se.SensitivityReport(r["w"], r["mode"], entries, r["forward_passes"])
    v = art["validated_ranking"]
    st.ranking = pr.FeatureRanking(np.asarray(v["scores"]), np.asarray(v["order"]), v["k"])


def _tree_params(st: State, kind: str) -> sg.TreeParams:
    c = st.cfg["surrogate"]
    return sg.TreeParams.for_kind(
        kind,
        n_trees=c["n_trees"],
        max_depth=c["max_depth"],
        min_samples_leaf=c["min_samples_leaf"],
        seed=st.cfg["seed"],
    )


def _run_surrogate(st: State) -> dict:
    c = st.cfg["surrogate"]
    out = {"features": [int(i) for i in st.features], "primary": c["primary"], "reports": {}, "forests": {}}
    for kind in c["kinds"]:
        forest, report = sg.surrogation_pipeline(
            st.blackbox, st.split, st.ranking, kind, _tree_params(st, kind), c["target"], float(c["threshold"])
        )
        st.forests[kind] = forest
        st.reports[kind] = report
        out["reports"][kind] = report.to_json()
        out["forests"][kind] = forest.to_json()
    return out


def _load_surrogate(st: State, art: dict):
    # configured order, not the sorted order of the JSON keys
    for kind in st.cfg["surrogate"]["kinds"]:
        st.forests[kind] = sg.SurrogateForest.from_json(art["forests"][kind])
        r = art["reports"][kind]
        st.reports[kind] = sg.SurrogateReport(kind, r["r_squared"], r["agreement"], r["threshold"])


def _instance_rows(n_test: int, n: int) -> np.ndarray:
    return np.arange(min(n, n_test))


def _run_attribution(st: State) -> dict:
    c = st.cfg["attribution"]
    cols = st.features
    Xtr, Xte = st.split.train.features[:, cols], st.split.test.features[:, cols]
    yte = st.split.test.labels
    out = {"features": [int(i) for i in cols], "pfi": {}, "gini": {}}
    for kind, forest in st.forests.items():
        p = attr.permutation_importance(forest, Xte, yte, c["pfi_repeats"], st.cfg["seed"])
        out["pfi"][kind] = {"values": [float(v) for v in p.values], "raw": [float(v) for v in p.raw]}
        out["gini"][kind] = [float(v) for v in sg.gini_importance(forest)]
    rows = _instance_rows(len(Xte), c["n_instances"])
    models = [st.forests[k] for k in st.cfg["surrogate"]["kinds"]]
    phis = np.array([attr.stacked_shap(models, Xte[i], Xtr, None, c["n_samples"], st.cfg["seed"]) for i in rows])
    importance = np.array([attr.importance_from_shap(p).values for p in phis])
    impacts = np.array([attr.impacts_from_shap(p).values for p in phis])
    out["stacked_shap"] = {
        "instances": [int(i) for i in rows],
        "local": [[float(v) for v in p] for p in phis],
        "mean_abs": [float(v) for v in attr.global_mean_abs_shap(phis).values],
        "global_importance": [float(v) for v in importance.mean(axis=0)],
        "global_impact": [float(v) for v in impacts.mean(axis=0)],
    }
    st.attribution = out
    return out


def _load_attribution(st: State, art: dict):
    st.attribution = art


def _rule_targets(st: State, X) -> np.ndarray:
    return st.primary.predict(X)


def _run_rules(st: State) -> dict:
    c = st.cfg["rules"]
    th = rl.RuleThresholds(float(c["min_support"]), float(c["min_confidence"]), float(c["min_coverage"]))
    cols = st.features
    Xtr, Xte = st.split.train.features[:, cols], st.split.test.features[:, cols]
    # the rule list distils the primary surrogate
    y = _rule_targets(st, Xtr)
    extracted = rl.extract_forest_rules(st.primary, Xtr, y)
    kept = rl.filter_rules(extracted, th)
    rule_list = rl.order_rule_list(kept, Xtr, y, th, st.split.train.n_classes)
    st.rule_list = rule_list
    names = list(st.split.train.class_names)
    return {
        "thresholds": {"min_support": th.min_support, "min_confidence": th.min_confidence,
                       "min_coverage": th.min_coverage},
        "n_extracted": len(extracted),
        "n_filtered": len(kept),
        "n_rules": len(rule_list.rules),
        "rule_list": rule_list.to_json(),
        "text": rule_list.text(names),
        "fidelity_train": rl.fidelity(rule_list, st.primary, Xtr),
        "fidelity_test": rl.fidelity(rule_list, st.primary, Xte),
        "confidence_test": rule_list.confidence(Xte),
    }


def _load_rules(st: State, art: dict):
    st.rule_list = rl.RuleList.from_json(art["rule_list"])


def explain_context(st: State) -> ExplainContext:
    return ExplainContext(
        blackbox=st.blackbox,
        surrogate=st.primary,
        rule_list=st.rule_list,
        features=st.features,
        background=st.split.train.features,
        feature_names=st.split.train.feature_names,
        class_names=st.split.train.class_names,
        n_samples=st.cfg["attribution"]["n_samples"],
        seed=st.cfg["seed"],
    )


def _global_scores(st: State) -> dict:
    cols = st.features
    sens = {e.feature: e.sensitivity for e in st.sensitivity.entries}
    return {
        "attention": np.asarray(st.attention_scores)[cols] if st.attention_scores is not None
        else np.asarray(st.ranking.input_scores)[cols],
        "sensitivity": np.array([sens.get(int(f), 0.0) for f in cols]),
        "gini": np.asarray(st.attribution["gini"][st.cfg["surrogate"]["primary"]]),
        "stacked_shap": np.asarray(st.attribution["stacked_shap"]["mean_abs"]),
    }


def _run_explanations(st: State) -> dict:
    c = st.cfg["explain"]
    rules_art = st.artifacts["rules"]
    cols = st.features
    names = tuple(st.split.train.feature_names[i] for i in cols)
    shap_art = st.attribution["stacked_shap"]
    g = explain_global(
        cols,
        names,
        _global_scores(st),
        c["primary_ranking"],
        c["report_k"],
        shap_art["global_importance"],
        shap_art["global_impact"],
        {k: r.to_json() for k, r in st.reports.items()},
        {"n_rules": rules_art["n_rules"], "fidelity_test": rules_art["fidelity_test"], "text": rules_art["text"]},
    )
    st.global_explanation = g
    ctx = explain_context(st)
    Xte = st.split.test.features
    local = [explain_instance(ctx, Xte[i], int(i)).to_json() for i in _instance_rows(len(Xte), c["n_instances"])]
    return {"global": g.to_json(), "local": local}


def _load_explanations(st: State, art: dict):
    st.global_explanation = GlobalExplanation.from_json(art["global"])


def _run_metrics(st: State) -> dict:
    c = st.cfg["metrics"]
    C = st.split.train.n_classes
    test = st.split.test
    cols = st.features
    p_bb = st.blackbox.predict_proba(test.features)
    out = {"blackbox": mt.classification_metrics(test.labels, p_bb.argmax(axis=1), C), "surrogates": {}}
    for kind, forest in st.forests.items():
        pred = forest.predict(test.features[:, cols])
        out["surrogates"][kind] = {
            "vs_truth": mt.classification_metrics(test.labels, pred, C),
            "vs_blackbox": mt.classification_metrics(p_bb.argmax(axis=1), pred, C),
        }
    out["rule_list"] = mt.classification_metrics(test.labels, st.rule_list.predict(test.features[:, cols]), C)
    out["calibration"] = {}
    out["lift"] = {}
    for k in range(C):
        positive = (test.labels == k).astype(np.int64)
        out["calibration"][st.split.test.class_names[k]] = mt.calibration_bins(positive, p_bb[:, k], c["n_bins"])
        out["lift"][st.split.test.class_names[k]] = mt.lift_curve(positive, p_bb[:, k], c["lift_cutoffs"])
    for name in ("calibration", "lift"):
        rows = [{"class": cls, **row} for cls, curve in out[name].items() for row in curve]
        (st.out / f"{name}.csv").write_text(mt.rows_to_csv(rows))
    return out


RUNNERS = {
    "ingest": (_run_ingest, _load_ingest),
    "blackbox": (_run_blackbox, _load_blackbox),
    "probe": (_run_probe, _load_probe),
    "sensitivity": (_run_sensitivity, _load_sensitivity),
    "surrogate": (_run_surrogate, _load_surrogate),
    "attribution": (_run_attribution, _load_attribution),
    "rules": (_run_rules, _load_rules),
    "explanations": (_run_explanations, _load_explanations),
    "metrics": (_run_metrics, lambda st, art: None),
}

# files besides <stage>.json that must exist for a cached stage to be usable
SIDE_FILES = {
    "ingest": ("train.json", "train.f64", "test.json", "test.f64"),
    "blackbox": ("blackbox_model.json", "blackbox_model.f64"),
    "metrics": ("calibration.csv", "lift.csv"),
}


def cache_key(st: State, stage: str) -> str:
    upstream = {d: file_digest(st.out / f"{d}.json") for d in DEPENDS[stage]}
    return config_hash({"stage": stage, "config": stage_config(st.cfg, stage), "upstream": upstream})


def _cached(st: State, stage: str, key: str):
    path = st.out / f"{stage}.json"
    if not path.is_file() or not all((st.out / f).is_file() for f in SIDE_FILES.get(stage, ())):
        return None
    try:
        art = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    return art if art.get("cache_key") == key else None


def run_pipeline(cfg: dict, force: bool = False, log=print, stages=STAGES) -> State:
    """Execute or reload every stage in order; returns the final state.

    ``log`` receives one ``"<stage>: ran|cached"`` line per stage.
    """
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "run_config.json", cfg)
    st = State(cfg, out)
    status = {}
    for stage in stages:
        key = cache_key(st, stage)
        run, load = RUNNERS[stage]
        art = None if force else _cached(st, stage, key)
        try:
            if art is not None:
                load(st, art)
                status[stage] = "cached"
            else:
                art = {"stage": stage, "cache_key": key, **run(st)}
                _write(out / f"{stage}.json", art)
                # reload what was written, so later stages see exactly what a cached run sees
                art = json.loads((out / f"{stage}.json").read_text())
                load(st, art)
                status[stage] = "ran"
        except Exception as exc:
            raise StageError(stage, exc) from exc
        st.artifacts[stage] = art
        log(f"{stage}: {status[stage]}")
    if tuple(stages) == STAGES:
        (out / "summary.md").write_text(summary_markdown(st))
    return st


def load_state(directory) -> State:
    """Rebuild the in-memory state from a finished run directory."""
    out = Path(directory)
    if not (out / "run_config.json").is_file():
        raise FileNotFoundError(f"{out} does not hold a finished run (run_config.json missing)")
    cfg = json.loads((out / "run_config.json").read_text())
    st = State(cfg, out)
    for stage in STAGES:
        path = out / f"{stage}.json"
        if not path.is_file():
            raise FileNotFoundError(f"missing artifact {path}")
        art = json.loads(path.read_text())
        RUNNERS[stage][1](st, art)
        st.artifacts[stage] = art
    return st


def summary_markdown(st: State) -> str:
    a = st.artifacts
    ing, bbx, prb = a["ingest"], a["blackbox"], a["probe"]
    names = st.split.train.feature_names
    lines = [
        "# Run summary",
        "",
        f"- rows: {ing['n_rows']} ({ing['train_rows']} train / {ing['test_rows']} test), "
        f"features: {ing['n_features']}, classes: {ing['n_classes']}",
        f"- black-box: embedding {bbx['embedding_dim']} ({bbx['channels']} channels, pool {bbx['pool_size']}), "
        f"test accuracy {bbx['test_accuracy']:.4f}",
        f"- attention probe ({prb['mode']} mode): test accuracy {prb['test_accuracy']:.4f}",
        f"- top-{st.cfg['top_k']} features: " + ", ".join(names[i] for i in st.features),
        "",
        "## Surrogates",
        "",
        "| kind | R^2 | agreement | verdict |",
        "|---|---|---|---|",
    ]
    for kind in st.cfg["surrogate"]["kinds"]:
        r = st.reports[kind]
        lines.append(f"| {kind} | {r.r_squared:.4f} | {r.agreement:.4f} | {r.verdict} |")
    rules = a["rules"]
    lines += [
        "",
        f"rule list: {rules['n_rules']} rules ({rules['n_filtered']} of {rules['n_extracted']} pass the filters), "
        f"test fidelity {rules['fidelity_test']:.4f}",
        "",
    ]
    lines.append(render_report(st.global_explanation, "markdown"))
    return "\n".join(lines)
