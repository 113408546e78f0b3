"""Command-line entry point: ``glassbox run | explain | sweep``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import blackbox as bb
from .config import ConfigError, load_config
from .explain import explain_instance, render_report
from .metrics import rows_to_csv
from .parallel import max_workers, pmap
from .pipeline import StageError, explain_context, load_state, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
SWEEP_SEEDS = 3


def cmd_run(config_path, force: bool = False, out=sys.stdout) -> int:
    cfg = load_config(config_path)
    run_pipeline(cfg, force=force, log=lambda line: print(line, file=out))
    print(f"artifacts: {cfg['output_dir']}", file=out)
    return EXIT_OK


def select_instance(n_rows: int, instance: int | None, random: bool, seed: int | None) -> int:
    if random:
        return int(np.random.default_rng(seed).integers(0, n_rows))
    if instance is None:
        raise ConfigError("choose --instance N or --random")
    if not 0 <= instance < n_rows:
        raise ConfigError(f"instance {instance} out of range; valid test rows are 0..{n_rows - 1}")
    return instance


def cmd_explain(directory, instance: int | None = None, random: bool = False, seed: int | None = None,
                fmt: str = "markdown", out=sys.stdout) -> int:
    try:
        st = load_state(directory)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    test = st.split.test
    row = select_instance(test.n_rows, instance, random, seed)
    e = explain_instance(explain_context(st), test.features[row], row)
    out.write(render_report(e, fmt))
    return EXIT_OK


def sweep_dims(n_features: int, fractions) -> list[int]:
    return [min(n_features - 1, max(1, round(f * n_features))) for f in fractions]


def cmd_sweep(config_path, fractions, out=sys.stdout) -> int:
    """Black-box test accuracy per embedding fraction, mean and std over three seeds."""
    cfg = load_config(config_path)
    if not fractions or any(not 0 < f < 1 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1)")
    st = run_pipeline(cfg, log=lambda line: print(line, file=sys.stderr), stages=("ingest",))
    train, test = st.split.train, st.split.test
    c = cfg["blackbox"]
    dims = sweep_dims(train.n_features, fractions)

    def point(job):
        dim, seed = job
        config = bb.TrainConfig(
            alpha_r=float(c["alpha_r"]), alpha_ce=float(c["alpha_ce"]), weight_decay=float(c["weight_decay"]),
            gain_l1=float(c["gain_l1"]),
            learning_rate=float(c["learning_rate"]), epochs=c["epochs"], batch_size=c["batch_size"], seed=seed,
        )
        model, _ = bb.train(train, config, dim, c["kernel_size"])
        return model.embedding_dim, float(np.mean(model.predict_labels(test.features) == test.labels))

    seeds = [cfg["seed"] + s for s in range(SWEEP_SEEDS)]
    jobs = [(d, s) for d in dims for s in seeds]
    results = pmap(point, jobs)
    rows = []
    for i, f in enumerate(fractions):
        chunk = results[i * SWEEP_SEEDS : (i + 1) * SWEEP_SEEDS]
        acc = np.array([a for _, a in chunk])
        rows.append(
            {
                "fraction": float(f),
                "embedding_dim": chunk[0][0],
                "mean_accuracy": float(acc.mean()),
                "std_accuracy": float(acc.std(ddof=1)),
                "seeds": " ".join(str(s) for s in seeds),
            }
        )
    text = rows_to_csv(rows)
    Path(cfg["output_dir"], "sweep.csv").write_text(text)
    out.write(text)
    return EXIT_OK


def _fractions(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glassbox", description="Attention-probed surrogate explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute every pipeline stage")
    run.add_argument("--config", required=True, help="YAML configuration file")
    run.add_argument("--force", action="store_true", help="ignore cached stages")

    ex = sub.add_parser("explain", help="explain one test instance of a finished run")
    ex.add_argument("--dir", required=True, help="artifact directory of a finished run")
    pick = ex.add_mutually_exclusive_group(required=True)
    pick.add_argument("--instance", type=int, help="test-row index")
    pick.add_argument("--random", action="store_true", help="pick a test row at random")
    ex.add_argument("--seed", type=int, default=0, help="seed for --random")
    ex.add_argument("--format", choices=("markdown", "json"), default="markdown")

    sw = sub.add_parser("sweep", help="accuracy versus embedding dimension")
    sw.add_argument("--config", required=True)
    sw.add_argument("--fractions", required=True, type=_fractions, help="e.g. 0.02,0.06,0.3,0.9")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        max_workers()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(args.config, args.force)
        if args.command == "explain":
            return cmd_explain(args.dir, args.instance, args.random, args.seed, args.format)
        return cmd_sweep(args.config, args.fractions)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
