"""Command line front end.

Subcommands: simulate a scenario file, sweep its coupling gain, run the
pacemaker ensemble experiment, verify a scenario's recipe invariants,
and render plots for an existing run directory.

Exit codes: 0 on success, 2 for configuration or validation problems,
3 for numerical failures during integration.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    DimensionMismatch,
    DisconnectedGraph,
    FunnelViolationAtStart,
    Infeasible,
    InvalidEdge,
    IoError,
    NoBracket,
    NonFiniteJacobian,
    NonFiniteState,
    NotConvex,
    NotDetectable,
    NotMonotone,
    NotObservable,
    NotPsd,
    NotSymmetric,
    NontrivialCommonUndetectable,
    RankDeficientA,
    StepUnderflow,
    WeightNotPd,
)

_VALIDATION = (
    ConfigError,
    InvalidEdge,
    DisconnectedGraph,
    DimensionMismatch,
    NotSymmetric,
    NotPsd,
    WeightNotPd,
    RankDeficientA,
    NotConvex,
    Infeasible,
    NotDetectable,
    NontrivialCommonUndetectable,
    NotObservable,
    FunnelViolationAtStart,
    IoError,
)
_NUMERICAL = (
    StepUnderflow,
    NonFiniteState,
    NonFiniteJacobian,
    NoBracket,
    NotMonotone,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blendnet",
        description="simulate coupled agent networks and their averaged models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario file")
    sim.add_argument("config", help="scenario JSON file")
    sim.add_argument("--out", help="output directory")

    sweep = sub.add_parser("sweep", help="rerun a scenario over several gains")
    sweep.add_argument("config", help="scenario JSON file")
    sweep.add_argument("--k", required=True,
                       help="comma-separated list of gains")
    sweep.add_argument("--out", help="output directory")

    exp = sub.add_parser("experiment", help="batch experiments")
    exp_sub = exp.add_subparsers(dest="experiment", required=True)
    pace = exp_sub.add_parser("pacemaker",
                              help="spread of the collective rhythm across trials")
    pace.add_argument("--n", type=int, default=10, help="population size")
    pace.add_argument("--trials", type=int, default=10)
    pace.add_argument("--seed", type=int, default=0)
    pace.add_argument("--k", type=float, default=50.0, help="coupling gain")
    pace.add_argument("--scale", type=float, default=1.0,
                      help="disorder scale (0 disables heterogeneity)")
    pace.add_argument("--t-end", type=float, default=60.0)
    pace.add_argument("--out", help="output directory")

    ver = sub.add_parser("verify", help="check a scenario's recipe invariants")
    ver.add_argument("config", help="scenario JSON file")

    plot = sub.add_parser("plot", help="render PNGs for a run directory")
    plot.add_argument("run_dir", help="directory written by simulate/experiment")

    return parser


def _resolve_out(explicit, scenario_dir, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get("BLENDNET_OUT")
    if env:
        return Path(env)
    if scenario_dir:
        return Path(scenario_dir)
    return Path("runs") / default_name


def _cmd_simulate(args) -> int:
    from .harness import load_scenario, run_scenario

    sc = load_scenario(args.config)
    out = _resolve_out(args.out, sc.output.directory, sc.name)
    result = run_scenario(sc, out_dir=out)
    for w in result.warnings:
        print(f"warning: {w}")
    err = result.summary["oracle_error"]
    if err is not None:
        print(f"terminal oracle error: {err:.3e}")
    print(f"wrote {result.files['trajectory']}")
    print(f"wrote {result.files['summary']}")
    if "funnel" in result.files:
        print(f"wrote {result.files['funnel']}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .harness import load_scenario, sweep_gain

    try:
        k_values = [float(tok) for tok in args.k.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad gain list {args.k!r}: {exc}") from exc
    if not k_values:
        raise ConfigError("the gain list is empty")
    sc = load_scenario(args.config)
    rows = sweep_gain(sc, k_values)
    lines = ["k,oracle_error,sync_error"]
    print(f"{'k':>10}  {'oracle error':>14}  {'sync error':>14}")
    for k, oracle_err, sync_err in rows:
        print(f"{k:>10g}  {oracle_err:>14.6e}  {sync_err:>14.6e}")
        lines.append(f"{k:.17g},{oracle_err:.17g},{sync_err:.17g}")
    out = _resolve_out(args.out, sc.output.directory, sc.name)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_pacemaker(args) -> int:
    from .harness import PacemakerConfig, pacemaker_experiment, write_experiment

    cfg = PacemakerConfig(
        n_agents=args.n,
        trials=args.trials,
        seed=args.seed,
        k=args.k,
        disorder_scale=args.scale,
        t_end=args.t_end,
    )
    result = pacemaker_experiment(cfg)
    out = _resolve_out(args.out, None, f"pacemaker-n{args.n}")
    files = write_experiment(result, out)
    ok = sum(1 for tr in result.trials if tr.ok)
    print(f"{ok}/{len(result.trials)} trials oscillated")
    for tr in result.trials:
        if not tr.ok:
            print(f"  trial {tr.index}: {tr.note}")
    print(f"amplitude spread: {result.spread_amplitude:.6g}")
    print(f"period spread:    {result.spread_period:.6g}")
    print(f"wrote {files['experiment']}")
    print(f"wrote {files['waveforms']}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .harness import load_scenario, verify_scenario

    sc = load_scenario(args.config)
    checks = verify_scenario(sc)
    failed = 0
    for name, ok, detail in checks:
        mark = "ok" if ok else "FAIL"
        print(f"{mark:>4}  {name}: {detail}")
        if not ok:
            failed += 1
    if failed:
        print(f"{failed} of {len(checks)} checks failed")
        return EXIT_VALIDATION
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .harness import emit_plots

    for path in emit_plots(args.run_dir):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "experiment":
            return _cmd_pacemaker(args)
        if args.command == "verify":
            return _cmd_verify(args)
        return _cmd_plot(args)
    except _VALIDATION as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
