"""Pipeline configuration: YAML file merged over defaults, validated, hashable."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .surrogate import KINDS


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "glassbox_run",
    "data": {
        "source": "synthetic",
        "csv": {"path": None, "label_column": "label", "has_header": True},
        "synthetic": {"n": 2000, "m_total": 500, "m_informative": 10, "n_classes": 4, "class_sep": 3.0},
        "train_fraction": 0.8,
    },
    "blackbox": {
        "embedding_dim": None,
        "kernel_size": 1,
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "alpha_r": 1.0,
        "alpha_ce": 1.0,
        "weight_decay": 0.0,
        "gain_l1": 0.02,
    },
    "probe": {"mode": "input", "k_heads": 1, "hidden": 32, "epochs": 60, "batch_size": 32, "learning_rate": 1e-3},
    "top_k": 20,
    "sensitivity": {"w": 1.0, "mode": "additive", "selection": "deviation"},
    "surrogate": {
        "kinds": ["DT", "RF", "ERT"],
        "primary": "ERT",
        "target": "truth",
        "n_trees": 100,
        "max_depth": 12,
        "min_samples_leaf": 2,
        "threshold": 0.9,
    },
    "attribution": {"n_instances": 20, "n_samples": 500, "pfi_repeats": 5},
    "rules": {"min_support": 0.01, "min_confidence": 0.6, "min_coverage": 0.05},
    "explain": {"primary_ranking": "stacked_shap", "report_k": 5, "n_instances": 5},
    "metrics": {"n_bins": 10, "lift_cutoffs": [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _check(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _count_csv_columns(path: Path, has_header: bool) -> tuple[int, list]:
    with open(path, newline="") as fh:
        first = fh.readline()
    cells = [c.strip() for c in first.rstrip("\r\n").split(",")]
    return len(cells), cells if has_header else []


def validate(cfg: dict, base_dir: Path) -> dict:
    """Type and range checks; resolves relative paths against ``base_dir``."""
    _check(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    data = cfg["data"]
    _check(data["source"] in ("synthetic", "csv"), "data.source must be 'synthetic' or 'csv'")
    _check(0 < float(data["train_fraction"]) < 1, "data.train_fraction must lie in (0, 1)")
    if data["source"] == "csv":
        raw = data["csv"]["path"]
        _check(bool(raw), "data.csv.path is required when data.source is 'csv'")
        path = Path(raw)
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        _check(path.is_file(), f"data file not found: {path}")
        data["csv"]["path"] = str(path)
        n_cols, header = _count_csv_columns(path, data["csv"]["has_header"])
        label = data["csv"]["label_column"]
        if header:
            _check(str(label) in header, f"label column {label!r} not in header")
        n_features = n_cols - 1
    else:
        syn = data["synthetic"]
        for key in ("n", "m_total", "m_informative", "n_classes"):
            _check(isinstance(syn[key], int) and syn[key] >= 1, f"data.synthetic.{key} must be a positive integer")
        _check(syn["m_informative"] <= syn["m_total"], "m_informative must not exceed m_total")
        _check(syn["n_classes"] >= 2, "n_classes must be >= 2")
        _check(float(syn["class_sep"]) >= 2, "class_sep must be >= 2")
        n_features = syn["m_total"]
    k = cfg["top_k"]
    _check(isinstance(k, int) and 1 <= k <= n_features, f"top_k must lie in [1, {n_features}]")

    bb = cfg["blackbox"]
    for key in ("epochs", "batch_size", "kernel_size"):
        _check(isinstance(bb[key], int) and bb[key] >= 1, f"blackbox.{key} must be a positive integer")
    if bb["embedding_dim"] is not None:
        _check(
            isinstance(bb["embedding_dim"], int) and 1 <= bb["embedding_dim"] < n_features,
            "blackbox.embedding_dim must lie in [1, M)",
        )
    for key in ("weight_decay", "gain_l1"):
        _check(float(bb[key]) >= 0, f"blackbox.{key} must be >= 0")
    pr = cfg["probe"]
    _check(pr["mode"] in ("input", "embedding"), "probe.mode must be 'input' or 'embedding'")
    _check(isinstance(pr["k_heads"], int) and pr["k_heads"] >= 1, "probe.k_heads must be >= 1")
    sen = cfg["sensitivity"]
    _check(float(sen["w"]) != 0, "sensitivity.w must be non-zero")
    _check(sen["mode"] in ("additive", "multiplicative"), "sensitivity.mode must be additive or multiplicative")
    _check(sen["selection"] in ("attention", "deviation"), "sensitivity.selection must be attention or deviation")
    sur = cfg["surrogate"]
    kinds = list(sur["kinds"])
    _check(len(kinds) > 0 and all(kd in KINDS for kd in kinds), f"surrogate.kinds must be drawn from {KINDS}")
    _check(sur["primary"] in kinds, "surrogate.primary must be one of surrogate.kinds")
    _check(sur["target"] in ("truth", "blackbox"), "surrogate.target must be 'truth' or 'blackbox'")
    att = cfg["attribution"]
    _check(att["n_samples"] >= 100, "attribution.n_samples must be >= 100")
    _check(att["n_instances"] >= 1, "attribution.n_instances must be >= 1")
    ex = cfg["explain"]
    _check(
        ex["primary_ranking"] in ("attention", "sensitivity", "gini", "stacked_shap"),
        "explain.primary_ranking must be attention, sensitivity, gini or stacked_shap",
    )
    out = Path(cfg["output_dir"])
    cfg["output_dir"] = str(out if out.is_absolute() else (base_dir / out).resolve())
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return validate(_merge(DEFAULTS, raw), path.parent.resolve())


def from_dict(overrides: dict, base_dir=".") -> dict:
    return validate(_merge(DEFAULTS, overrides), Path(base_dir).resolve())


def _canonical(obj):
    # 1 and 1.0 are the same setting
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    raise TypeError(f"cannot hash {type(obj).__name__}")


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form, so formatting never matters."""
    text = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
