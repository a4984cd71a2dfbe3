"""Experiment orchestration: sweeps of algorithm trials, matching SE
predictions, and their comparison.

Config files are JSON with ``"schema": 1``; every output carries the
config hash and master seed.  Trials derive independent seeds from
(master seed, sweep value, trial index) so execution order and thread
count cannot change any number.
"""

import concurrent.futures
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import applications as apps
from .denoisers import DenoiserSuite
from .engine import VampOptions, run
from .errors import InvalidConfigError, InvalidPairingError, MlMatVampError
from .quadrature import QuadratureCfg
from .rng import tag_to_int
from .se import SeOptions, predict_test_error, se_run

__all__ = ["ExperimentConfig", "simulate", "se_predict", "compare_summaries",
           "summary_to_csv", "comparison_to_csv"]

_APPLICATIONS = ("two_layer", "multi_task", "mixed_regression")


@dataclass
class ExperimentConfig:
    application: str = "two_layer"
    params: dict = field(default_factory=dict)
    sweep_name: str = "n_samples"
    sweep_values: list = field(default_factory=lambda: [500])
    trials: int = 1
    seed: int = 0
    vamp: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    n_test: int = 1000

    def __post_init__(self):
        if self.application not in _APPLICATIONS:
            raise InvalidConfigError(
                f"unknown application {self.application!r}")
        if self.trials < 1 or not self.sweep_values:
            raise InvalidConfigError("need >= 1 trial and >= 1 sweep value")

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != 1:
            raise InvalidConfigError("config must declare \"schema\": 1")
        sweep = data.get("sweep", {})
        return cls(
            application=data.get("application", "two_layer"),
            params=dict(data.get("params", {})),
            sweep_name=sweep.get("name", "n_samples"),
            sweep_values=list(sweep.get("values", [500])),
            trials=int(data.get("trials", 1)),
            seed=int(data.get("seed", 0)),
            vamp=dict(data.get("vamp", {})),
            se=dict(data.get("se", {})),
            n_test=int(data.get("n_test", 1000)),
        )

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "schema": 1,
            "application": self.application,
            "params": self.params,
            "sweep": {"name": self.sweep_name, "values": self.sweep_values},
            "trials": self.trials,
            "seed": self.seed,
            "vamp": self.vamp,
            "se": self.se,
            "n_test": self.n_test,
        }

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _trial_seed(master_seed, value, trial):
    mix = (int(master_seed), tag_to_int("trial"),
           tag_to_int(repr(value)), int(trial))
    digest = hashlib.blake2s(repr(mix).encode(), digest_size=6).digest()
    return int.from_bytes(digest, "little")


def build_problem(cfg, sweep_value, seed):
    params = dict(cfg.params)
    params[cfg.sweep_name] = sweep_value
    if cfg.application == "two_layer":
        return apps.build_two_layer(
            n_samples=int(params.get("n_samples", 500)),
            n_in=int(params.get("n_in", 100)),
            d=int(params.get("d", 4)),
            activation=params.get("activation", "sigmoid"),
            snr_db=float(params.get("snr_db", 10.0)),
            n_out=int(params.get("n_out", 1)),
            seed=seed,
        )
    if cfg.application == "multi_task":
        return apps.build_multi_task(
            n_samples=int(params.get("n_samples", 500)),
            n_features=int(params.get("n_features", 100)),
            d=int(params.get("d", 2)),
            prior=params.get("prior", "gaussian"),
            noise_var=float(params.get("noise_var", 0.01)),
            active_prob=float(params.get("active_prob", 0.1)),
            lam=params.get("lam"),
            seed=seed,
        )
    return apps.build_mixed_regression(
        n_samples=int(params.get("n_samples", 500)),
        n_features=int(params.get("n_features", 50)),
        q_prob=float(params.get("q_prob", 0.5)),
        noise_var=float(params.get("noise_var", 0.01)),
        seed=seed,
    )


def _vamp_options(cfg):
    v = cfg.vamp
    return VampOptions(
        n_iter=int(v.get("n_iter", 20)),
        damping=float(v.get("damping", 1.0)),
        mode=v.get("mode", "mmse"),
    )


def _suite(cfg, model, which):
    section = cfg.vamp if which == "vamp" else cfg.se
    quad = QuadratureCfg(
        order=int(section.get("quad_order", 20)),
        samples=int(section.get("quad_samples", 20000)),
    )
    mode = cfg.vamp.get("mode", "mmse")
    penalty = None
    return DenoiserSuite(model, mode=mode, quad=quad, map_penalty=penalty)


def run_trial(cfg, sweep_value, trial):
    """One algorithm run; returns the per-trial metric record."""
    seed = _trial_seed(cfg.seed, sweep_value, trial)
    problem = build_problem(cfg, sweep_value, seed)
    suite = _suite(cfg, problem.model, "vamp")
    opts = _vamp_options(cfg)
    trace = run(problem.model, problem.y, opts, suite,
                signals=problem.signals)
    record = {
        "trial": trial,
        "seed": seed,
        "mse_layer0": trace.layer_mse(0).tolist(),
        "safeguard_events": trace.safeguard_events,
        "wall_time": sum(r.wall_time for r in trace.records),
    }
    if cfg.application == "two_layer":
        f1_hat = trace.records[-1].zhat_plus[0]
        test = apps.empirical_test_error(problem, f1_hat, n_test=cfg.n_test)
        record["test_excess_empirical"] = test["empirical"]
        record["test_excess_cov_route"] = test["covariance_route"]
        record["route_ratio"] = test["ratio"]
        record["noise_var"] = problem.noise_var
        record["normalized_test_mse"] = 1.0 + test["empirical"] \
            / problem.noise_var
    else:
        record["final_mse_layer0"] = record["mse_layer0"][-1]
    return record, trace


def _aggregate(records, key):
    vals = np.array([r[key] for r in records], dtype=float)
    n = vals.shape[0]
    return {
        "mean": vals.mean(axis=0).tolist(),
        "std": vals.std(axis=0, ddof=1).tolist() if n > 1
        else np.zeros_like(vals.mean(axis=0)).tolist(),
        "stderr": (vals.std(axis=0, ddof=1) / np.sqrt(n)).tolist() if n > 1
        else np.zeros_like(vals.mean(axis=0)).tolist(),
        "n": n,
    }


def simulate(cfg, threads=1, keep_traces=False):
    """Run all (sweep value, trial) cells; failures are tallied per trial."""
    points = []
    traces = {}
    for value in cfg.sweep_values:
        records = [None] * cfg.trials
        failures = []

        def work(t, v=value):
            return t, run_trial(cfg, v, t)

        if threads > 1:
            with concurrent.futures.ThreadPoolExecutor(threads) as pool:
                futures = [pool.submit(work, t) for t in range(cfg.trials)]
                for fut in futures:
                    try:
                        t, (rec, trace) = fut.result()
                        records[t] = rec
                        if keep_traces:
                            traces[(value, t)] = trace
                    except MlMatVampError as exc:
                        failures.append(str(exc))
        else:
            for t in range(cfg.trials):
                try:
                    _, (rec, trace) = work(t)
                    records[t] = rec
                    if keep_traces:
                        traces[(value, t)] = trace
                except MlMatVampError as exc:
                    failures.append(str(exc))
        records = [r for r in records if r is not None]
        point = {"value": value, "n_trials": len(records),
                 "failures": failures}
        if records:
            point["mse_layer0"] = _aggregate(records, "mse_layer0")
            point["wall_time"] = float(np.sum(
                [r["wall_time"] for r in records]))
            point["safeguard_events"] = int(np.sum(
                [r["safeguard_events"] for r in records]))
            if cfg.application == "two_layer":
                for key in ("test_excess_empirical", "test_excess_cov_route",
                            "route_ratio", "normalized_test_mse",
                            "noise_var"):
                    point[key] = _aggregate(records, key)
            point["trial_records"] = records
        points.append(point)
    summary = {
        "kind": "simulate",
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "application": cfg.application,
        "sweep_name": cfg.sweep_name,
        "points": points,
    }
    return (summary, traces) if keep_traces else summary


def se_predict(cfg):
    """SE prediction per sweep point, on the trial-0 instance's model."""
    points = []
    for value in cfg.sweep_values:
        seed = _trial_seed(cfg.seed, value, 0)
        problem = build_problem(cfg, value, seed)
        suite = _suite(cfg, problem.model, "se")
        opts = SeOptions(
            samples=int(cfg.se.get("samples", 50000)),
            n_iter=int(cfg.se.get("n_iter", cfg.vamp.get("n_iter", 20))),
            seed=int(cfg.se.get("seed", cfg.seed + 1)),
            mode=cfg.vamp.get("mode", "mmse"),
        )
        history = se_run(problem.model, opts, suite)
        mse = [rec.mse_plus[0] for rec in history.iterations]
        mse_se = [rec.mse_plus_se[0] for rec in history.iterations]
        point = {"value": value, "mse_layer0_pred": mse,
                 "mse_layer0_stderr": mse_se,
                 "safeguard_events": history.safeguard_events}
        if cfg.application == "two_layer":
            k_test = history.iterations[-1].k_test
            excess, excess_se = predict_test_error(
                k_test, problem.f2, problem.activation,
                n_mc=int(cfg.se.get("test_mc", 100000)))
            point["test_excess_pred"] = excess
            point["test_excess_stderr"] = excess_se
            point["noise_var"] = problem.noise_var
            point["normalized_test_mse_pred"] = 1.0 + excess \
                / problem.noise_var
        points.append(point)
    return {
        "kind": "se",
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "application": cfg.application,
        "sweep_name": cfg.sweep_name,
        "points": points,
    }


def compare_summaries(sim, se, rel_tol=0.10, n_se=3.0, skip_first=1):
    """Bandwise verdicts: simulated means against SE predictions.

    A point passes when, for every compared iteration, |sim - pred| is
    within max(rel_tol * |pred|, n_se * combined standard error).
    """
    if sim.get("sweep_name") != se.get("sweep_name") or \
            [p["value"] for p in sim["points"]] != \
            [p["value"] for p in se["points"]]:
        raise InvalidPairingError("summaries have different sweep grids")
    report = {"points": [], "passed": True,
              "sim_hash": sim.get("config_hash"),
              "se_hash": se.get("config_hash")}
    for ps, pe in zip(sim["points"], se["points"]):
        entry = {"value": ps["value"], "iterations": [], "passed": True}
        if "mse_layer0" not in ps:
            entry["passed"] = False
            entry["reason"] = "no successful trials"
            report["points"].append(entry)
            report["passed"] = False
            continue
        mean = ps["mse_layer0"]["mean"]
        stderr = ps["mse_layer0"]["stderr"]
        pred = pe["mse_layer0_pred"]
        pred_se = pe["mse_layer0_stderr"]
        kmax = min(len(mean), len(pred))
        for k in range(skip_first, kmax):
            comb = float(np.hypot(stderr[k], pred_se[k]))
            band = max(rel_tol * abs(pred[k]), n_se * comb)
            diff = abs(mean[k] - pred[k])
            ok = diff <= band
            entry["iterations"].append(
                {"k": k, "sim": mean[k], "pred": pred[k],
                 "diff": diff, "band": band, "passed": ok})
            entry["passed"] = entry["passed"] and ok
        if "normalized_test_mse" in ps and "normalized_test_mse_pred" in pe:
            sim_norm = ps["normalized_test_mse"]["mean"]
            pred_norm = pe["normalized_test_mse_pred"]
            comb = float(np.hypot(ps["normalized_test_mse"]["stderr"],
                                  pe["test_excess_stderr"]
                                  / max(pe["noise_var"], 1e-300)))
            band = max(rel_tol * abs(pred_norm), n_se * comb)
            ok = abs(sim_norm - pred_norm) <= band
            entry["test_error"] = {"sim": sim_norm, "pred": pred_norm,
                                   "band": band, "passed": ok}
            entry["passed"] = entry["passed"] and ok
        report["points"].append(entry)
        report["passed"] = report["passed"] and entry["passed"]
    return report


def summary_to_csv(summary):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if summary["kind"] == "simulate":
        writer.writerow(["value", "k", "mse_layer0_mean", "mse_layer0_stderr"])
        for point in summary["points"]:
            if "mse_layer0" not in point:
                continue
            mean = point["mse_layer0"]["mean"]
            se = point["mse_layer0"]["stderr"]
            for k in range(len(mean)):
                writer.writerow([point["value"], k, repr(mean[k]),
                                 repr(se[k])])
    else:
        writer.writerow(["value", "k", "mse_layer0_pred",
                         "mse_layer0_stderr"])
        for point in summary["points"]:
            for k in range(len(point["mse_layer0_pred"])):
                writer.writerow([point["value"], k,
                                 repr(point["mse_layer0_pred"][k]),
                                 repr(point["mse_layer0_stderr"][k])])
    return buf.getvalue()


def comparison_to_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["value", "k", "sim", "pred", "diff", "band", "passed"])
    for point in report["points"]:
        for it in point.get("iterations", []):
            writer.writerow([point["value"], it["k"], repr(it["sim"]),
                             repr(it["pred"]), repr(it["diff"]),
                             repr(it["band"]), it["passed"]])
        if "test_error" in point:
            te = point["test_error"]
            writer.writerow([point["value"], "test", repr(te["sim"]),
                             repr(te["pred"]), "", repr(te["band"]),
                             te["passed"]])
    return buf.getvalue()
