"""Command-line front end: simulate, estimate, montecarlo, summarize, diagnose.

Exit codes: 0 success, 1 usage or input-format error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .estimators import (
    EplOptions,
    LinearStepError,
    ccp_logit_init,
    epl_estimate,
    format_result_record,
    nfxp_estimate,
    npl_one_step,
    write_result_record,
)
from .game import Game, Theta
from .harness import (
    KNOWN_METHODS,
    MonteCarloConfig,
    _EPL_MODE,
    error_bound_report,
    format_error_bound,
    format_summary,
    read_records,
    run_monte_carlo,
    summarize,
    write_summary,
)
from .numerics import SingularMatrixError
from .simulate import (
    ConfigFormatError,
    DatasetFormatError,
    EquilibriumError,
    read_config,
    read_dataset,
    simulate_dataset,
    solve_equilibrium,
    write_dataset,
)

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit code 1
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dgepl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a dataset from a config file")
    p_sim.add_argument("--config", required=True, help="run configuration file")
    p_sim.add_argument("--out", required=True, help="output dataset CSV")
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_est = sub.add_parser("estimate", help="estimate parameters from a dataset")
    p_est.add_argument("--data", required=True, help="dataset CSV")
    p_est.add_argument("--config", required=True, help="run configuration file")
    p_est.add_argument("--method", default="epl-jf", choices=KNOWN_METHODS)
    p_est.add_argument("--out", default=None, help="write the result record here")

    p_mc = sub.add_parser("montecarlo", help="run Monte Carlo replications")
    p_mc.add_argument("--config", required=True, help="run configuration file")
    p_mc.add_argument("--out", required=True, help="output directory")
    p_mc.add_argument("--reps", type=int, default=20)
    p_mc.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_mc.add_argument("--threads", type=int, default=1)
    p_mc.add_argument("--methods", default="epl-anal,epl-jf",
                      help="comma-separated subset of " + ",".join(KNOWN_METHODS))
    p_mc.add_argument("--k", default="inf",
                      help="comma-separated iteration counts, e.g. 1,2,3,inf")

    p_sum = sub.add_parser("summarize", help="summarize a Monte Carlo records CSV")
    p_sum.add_argument("path", help="records.csv or a directory containing it")
    p_sum.add_argument("--baseline", default="epl-anal", choices=KNOWN_METHODS)
    p_sum.add_argument("--out", default=None, help="summary CSV path")

    p_diag = sub.add_parser("diagnose", help="linear-solve error-bound diagnostic")
    p_diag.add_argument("--config", required=True, help="run configuration file")
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--points", type=int, default=1,
                        help="number of perturbed evaluation points")
    p_diag.add_argument("--gmres-tol", type=float, default=1e-5)
    return parser


def _cmd_simulate(args) -> int:
    config, theta, n_obs, seed = read_config(args.config)
    if args.seed is not None:
        seed = args.seed
    dataset = simulate_dataset(config, theta, n_obs, seed)
    write_dataset(dataset, args.out)
    print(f"wrote {dataset.n_obs} observations to {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    config, _theta, _n, _seed = read_config(args.config)
    dataset = read_dataset(args.data)
    game = Game(config)
    ccps = ccp_logit_init(dataset, game)
    theta0, v0 = npl_one_step(dataset, ccps, game)
    if args.method == "nfxp-jf":
        result = nfxp_estimate(dataset, theta0, game)
    else:
        result = epl_estimate(dataset, (theta0, v0), game,
                              EplOptions(mode=_EPL_MODE[args.method]))
    record = format_result_record(result)
    sys.stdout.write(record)
    if args.out:
        write_result_record(result, args.out)
    return 0 if result.converged else NUMERICAL_ERROR


def _cmd_montecarlo(args) -> int:
    config, theta, n_obs, seed = read_config(args.config)
    if args.seed is not None:
        seed = args.seed
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    k_list = tuple(None if tok.strip() == "inf" else int(tok)
                   for tok in args.k.split(",") if tok.strip())
    cfg = MonteCarloConfig(
        replications=args.reps, base_seed=seed, game=config, theta_true=theta,
        n_obs=n_obs, methods=methods, k_list=k_list or (None,),
    )
    def progress(rep):
        print(f"replication {rep + 1}/{args.reps} done", flush=True)
    run_monte_carlo(cfg, out_dir=args.out, threads=args.threads, progress=progress)
    print(f"records written to {args.out}/records.csv")
    return 0


def _cmd_summarize(args) -> int:
    import os

    path = args.path
    if os.path.isdir(path):
        path = os.path.join(path, "records.csv")
    records = read_records(path)
    rows = summarize(records, baseline=args.baseline)
    print(format_summary(rows))
    out = args.out or (os.path.splitext(path)[0] + "_summary.csv")
    write_summary(rows, out)
    print(f"summary written to {out}")
    return 0


def _cmd_diagnose(args) -> int:
    config, theta, _n, _seed = read_config(args.config)
    game = Game(config)
    v_star = solve_equilibrium(game, theta)
    rng = np.random.default_rng(args.seed)
    all_hold = True
    for point in range(args.points):
        if point == 0:
            th, v = theta, v_star
            label = "equilibrium point"
        else:
            th = Theta.from_array(theta.as_array() + 0.25 * rng.standard_normal(game.n_params))
            v = v_star + 0.5 * rng.standard_normal(v_star.shape)
            label = f"perturbed point {point}"
        report = error_bound_report(game, th, v, gmres_tol=args.gmres_tol,
                                    seed=args.seed + point)
        print(f"-- {label}")
        print(format_error_bound(report))
        all_hold = all_hold and report.all_hold()
    print("bound holds on all columns" if all_hold else "BOUND VIOLATED")
    return 0 if all_hold else NUMERICAL_ERROR


def cli_dispatch(argv) -> int:
    """Parse argv (excluding the program name) and run the subcommand."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    handlers = {
        "simulate": _cmd_simulate,
        "estimate": _cmd_estimate,
        "montecarlo": _cmd_montecarlo,
        "summarize": _cmd_summarize,
        "diagnose": _cmd_diagnose,
    }
    try:
        return handlers[args.command](args)
    except (ConfigFormatError, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (EquilibriumError, LinearStepError, SingularMatrixError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
