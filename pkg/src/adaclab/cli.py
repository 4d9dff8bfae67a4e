"""Command-line front end: ``adaclab run | sweep | verify``.

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 partial sweep.
The output root is ``--out``, else ``$ADACLAB_OUT``, else ``./adaclab_out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import MODES, ExperimentConfig
from .errors import AdaclabError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

log = logging.getLogger("adaclab")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _out_root(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("ADACLAB_OUT")
    if env:
        return Path(env)
    return Path(cfg.out) if cfg is not None and cfg.out else Path("adaclab_out")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if getattr(args, "mode", None):
        cfg.mode = args.mode
        cfg.validate_shape()
    if getattr(args, "seeds", None):
        cfg.seeds = args.seeds
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_one

    cfg = _load(args)
    out = _out_root(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for seed in cfg.seeds:
        res = run_one(cfg, cfg.T, seed)
        d = out if len(cfg.seeds) == 1 else out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        res.trace.to_csv(d / "trace.csv")
        (d / "summary.json").write_text(json.dumps(res.report, indent=2, default=str))
        summaries.append(res.report)
        print(f"seed {seed}: regret {res.report['regret']:.6g} "
              f"(learner {res.report['learner_cost']:.6g}, comparator {res.report['comparator_cost']:.6g})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep, write_sweep

    cfg = _load(args)
    if not args.seeds:
        raise ConfigError("sweep needs explicit --seeds")
    horizons = args.horizons
    if not horizons or len(horizons) < 4:
        raise ConfigError("sweep needs at least 4 horizons (--horizons)")
    out = _out_root(args, cfg)
    results = run_sweep(cfg, horizons, args.seeds, jobs=args.jobs)
    summary = write_sweep(results, horizons, out)
    for T, med in zip(horizons, summary["median_regret"]):
        print(f"T={T:>7d}  median regret {med:.6g}")
    if summary.get("exponent") is not None:
        print(f"fitted exponent {summary['exponent']:.4f}")
    if summary["failed"]:
        for T, seed, err in summary["failed"]:
            print(f"failed: T={T} seed={seed}: {err}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    t0 = time.perf_counter()
    ok = run_all()
    print(f"{'all checks passed' if ok else 'some checks FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaclab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config (defaults documented in adaclab.config)")
        sp.add_argument("--out", help="output directory (overrides $ADACLAB_OUT)")
        sp.add_argument("--mode", choices=MODES, help="override the config's mode")
        sp.add_argument("--seeds", type=_int_list, help="comma-separated seeds, e.g. 0,1,2")

    run = sub.add_parser("run", help="run one configured experiment; writes trace.csv and summary.json")
    common(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="regret over several horizons; writes regret_vs_T.csv")
    common(sweep)
    sweep.add_argument("--horizons", type=_int_list, required=True, help="comma-separated T values (>= 4)")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="fast self-check suite with a pass/fail table")
    verify.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdaclabError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
