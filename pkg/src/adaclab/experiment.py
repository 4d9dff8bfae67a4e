"""Single runs and parallel sweeps driven by an :class:`ExperimentConfig`."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .errors import AdaclabError, ConfigError
from .pipeline import (EtcConfig, RunTrace, evaluate, make_clean_trajectory, run_clean, run_etc,
                       run_output_etc, slope_fit)

SWEEP_COLUMNS = ["T", "seed", "regret", "learner_cost", "comparator_cost", "T_s", "status"]


@dataclass
class RunResult:
    T: int
    seed: int
    trace: Optional[RunTrace]
    report: dict
    status: str = "ok"
    error: str = ""


def run_one(cfg: ExperimentConfig, T: int, seed: int) -> RunResult:
    """Execute one configured run and evaluate its regret.

    Raises :class:`ConfigError` for invalid configs and other
    :class:`AdaclabError` subclasses for numerical failures.
    """
    sys = cfg.build_system(seed)
    sched = cfg.resolved(sys, T)
    env = cfg.build_environment(sys, seed)
    cost = cfg.build_cost(sys, T, seed)
    L, output = sched["L"], cfg.mode == "output"
    if cfg.mode == "clean":
        clean = make_clean_trajectory(sys, L, sched["N"], np.random.default_rng([seed, 3]))
        trace = run_clean(env, clean, cost, T, L, cfg.D, cfg.G, seed=seed)
    else:
        etc = EtcConfig(n=sys.n, L=L, N=sched["N"], I0=sched["I0"], D=cfg.D, G=cfg.G, seed=seed,
                        count_stage1_cost=cfg.count_stage1_cost)
        runner = run_output_etc if output else run_etc
        trace = runner(env, cost, T, etc)
    rep = evaluate(trace, env, cost, L, cfg.D, output=output)
    report = {**trace.summary(), **rep.as_dict(), "mode": cfg.mode, "L": L, "N": sched["N"],
              "I0": sched["I0"]}
    return RunResult(T, seed, trace, report)


def _sweep_job(args):
    raw, T, seed = args
    cfg = ExperimentConfig.from_dict(raw)
    try:
        res = run_one(cfg, T, seed)
    except ConfigError:
        raise
    except (AdaclabError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return RunResult(T, seed, None, {}, status="failed", error=f"{type(exc).__name__}: {exc}")
    res.trace = None  # traces stay in the worker; only the report is aggregated
    return res


def synthetic_regret(T: int, seed: int, spec: dict) -> float:
    """``c T^a`` with multiplicative noise; exercises the sweep plumbing without runs."""
    rng = np.random.default_rng([seed, int(T)])
    noise = float(spec.get("noise", 0.05))
    return float(spec.get("c", 1.0)) * T ** float(spec.get("exponent", 2.0 / 3.0)) * (1 + noise * rng.uniform(-1, 1))


def run_sweep(cfg: ExperimentConfig, horizons, seeds, jobs: int = 1):
    """Run every ``(T, seed)`` pair; returns results keyed by ``(T, seed)``."""
    synthetic = cfg.extra.get("synthetic")
    results = {}
    if synthetic is not None:
        for T in horizons:
            for s in seeds:
                r = synthetic_regret(T, s, synthetic)
                results[(T, s)] = RunResult(T, s, None, {"regret": r, "learner_cost": r,
                                                         "comparator_cost": 0.0, "T_s": 0})
        return results
    # validate every horizon up front so a bad config fails before any work
    for T in horizons:
        cfg.resolved(cfg.build_system(seeds[0]), T)
    jobs_list = [(cfg.to_dict(), T, s) for T in horizons for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_sweep_job, jobs_list))
    else:
        out = [_sweep_job(j) for j in jobs_list]
    for res in out:
        results[(res.T, res.seed)] = res
    return results


def median_regrets(results, horizons):
    """Median regret per horizon; failed runs count as ``+inf``."""
    med = []
    for T in horizons:
        vals = [r.report["regret"] if r.status == "ok" else math.inf
                for (t, _), r in sorted(results.items()) if t == T]
        med.append(float(np.median(vals)))
    return np.array(med)


def write_sweep(results, horizons, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "regret_vs_T.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for key in sorted(results):
            r = results[key]
            rep = r.report
            w.writerow([r.T, r.seed, repr(rep.get("regret", math.nan)), repr(rep.get("learner_cost", math.nan)),
                        repr(rep.get("comparator_cost", math.nan)), rep.get("T_s", ""), r.status])
    med = median_regrets(results, horizons)
    summary = {"horizons": list(map(int, horizons)), "median_regret": med.tolist(),
               "failed": [[r.T, r.seed, r.error] for r in results.values() if r.status != "ok"]}
    if len(horizons) >= 4 and np.all(np.isfinite(med)):
        fit = slope_fit(horizons, med)
        summary.update(exponent=fit.exponent, intercept=fit.intercept, clamped=fit.clamped)
    else:
        summary["exponent"] = None
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
