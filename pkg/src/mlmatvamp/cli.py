"""Command-line entry point.

    mlmatvamp simulate --config cfg.json --out dir [--seed N] [--trials N]
                       [--threads N]
    mlmatvamp se       --config cfg.json --out dir [--seed N]
    mlmatvamp compare  --config cfg.json --out dir
    mlmatvamp diagnose --config cfg.json --out dir [--seed N]

Exit codes: 0 success, 1 gating-criterion failure, 2 config error,
3 numerical failure.  All outputs carry the config hash and seed;
reruns with the same config and seed are byte-identical regardless of
--threads.
"""

import argparse
import json
import sys
from pathlib import Path

from .errors import InvalidConfigError, InvalidPairingError, MlMatVampError
from .experiments import (
    ExperimentConfig,
    compare_summaries,
    comparison_to_csv,
    se_predict,
    simulate,
    summary_to_csv,
)

EXIT_OK = 0
EXIT_GATING = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    return cfg


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump_json(path, obj):
    _write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_simulate(args):
    cfg = _load_config(args)
    out = Path(args.out) / "simulate"
    summary, traces = simulate(cfg, threads=args.threads, keep_traces=True)
    _dump_json(out / "summary.json", summary)
    _write(out / "summary.csv", summary_to_csv(summary))
    from .engine import trace_to_csv

    for (value, trial), trace in sorted(traces.items(),
                                        key=lambda kv: repr(kv[0])):
        _write(out / "traces" / f"trial_{value}_{trial}.csv",
               trace_to_csv(trace))
    total = sum(p["n_trials"] for p in summary["points"])
    if total == 0:
        print("simulate: all trials failed", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"simulate: {total} trials ok, config {summary['config_hash']}")
    return EXIT_OK


def cmd_se(args):
    cfg = _load_config(args)
    out = Path(args.out) / "se"
    summary = se_predict(cfg)
    _dump_json(out / "summary.json", summary)
    _write(out / "summary.csv", summary_to_csv(summary))
    print(f"se: {len(summary['points'])} points, "
          f"config {summary['config_hash']}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args)
    out = Path(args.out)
    sim_path = out / "simulate" / "summary.json"
    se_path = out / "se" / "summary.json"
    for p in (sim_path, se_path):
        if not p.exists():
            print(f"compare: missing {p}; run simulate and se first",
                  file=sys.stderr)
            return EXIT_CONFIG
    with open(sim_path, encoding="utf-8") as fh:
        sim = json.load(fh)
    with open(se_path, encoding="utf-8") as fh:
        se = json.load(fh)
    report = compare_summaries(
        sim, se,
        rel_tol=float(cfg.se.get("compare_rel_tol", 0.10)),
        n_se=float(cfg.se.get("compare_n_se", 3.0)))
    _dump_json(out / "compare" / "report.json", report)
    _write(out / "compare" / "report.csv", comparison_to_csv(report))
    print(f"compare: {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_GATING


def cmd_diagnose(args):
    cfg = _load_config(args)
    out = Path(args.out) / "diagnose"
    from .diagnostics import compute_transformed_errors, gaussianity_report
    from .engine import run as engine_run
    from .experiments import _suite, _trial_seed, _vamp_options, build_problem
    from .se import SeOptions, se_run

    value = cfg.sweep_values[0]
    seed = _trial_seed(cfg.seed, value, 0)
    problem = build_problem(cfg, value, seed)
    trace = engine_run(problem.model, problem.y, _vamp_options(cfg),
                       _suite(cfg, problem.model, "vamp"),
                       signals=problem.signals)
    opts = SeOptions(
        samples=int(cfg.se.get("samples", 50000)),
        n_iter=int(cfg.se.get("n_iter", cfg.vamp.get("n_iter", 20))),
        seed=int(cfg.se.get("seed", cfg.seed + 1)),
        mode=cfg.vamp.get("mode", "mmse"))
    history = se_run(problem.model, opts, _suite(cfg, problem.model, "se"))
    errs = compute_transformed_errors(trace, problem.signals, problem.model)
    report = gaussianity_report(errs, history)
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "report.txt", report.summary_text() + "\n")
    rate = report.pass_rate()
    print(f"diagnose: pass rate {rate:.3f}, config {cfg.hash()}")
    return EXIT_OK if rate >= 0.95 else EXIT_GATING


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlmatvamp",
        description="Matrix multi-layer VAMP: simulate, predict, compare.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("se", cmd_se),
                     ("compare", cmd_compare), ("diagnose", cmd_diagnose)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        if name == "simulate":
            p.add_argument("--trials", type=int, default=None)
            p.add_argument("--threads", type=int, default=1)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidConfigError, InvalidPairingError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MlMatVampError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
