"""Command-line entry point: ``ratelab <experiment> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from ..expfam import parse_family
from ..fit import FitConfig, mle
from ..gating import Structure
from ..hme import save_model
from ..targets import make_target, read_dataset_csv, sample_dataset, write_dataset_csv
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .report import report_text, write_outputs

logger = logging.getLogger("ratelab")

_FIT_FLAGS = {
    "restarts": "restarts",
    "max_iters": "max_em_iters",
    "tol": "loglik_tol",
    "box": "box_bound",
    "init": "init_scheme",
    "mstep": "mstep",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fitting")
    g.add_argument("--restarts", type=int)
    g.add_argument("--max-iters", type=int, dest="max_iters")
    g.add_argument("--tol", type=float, help="EM log-likelihood tolerance")
    g.add_argument("--box", type=float, help="box bound on every parameter")
    g.add_argument("--init", choices=["random", "partition"])
    g.add_argument("--mstep", choices=["irls", "gradient"])


def _fit_config(args, base: FitConfig) -> FitConfig:
    over = {field: getattr(args, flag) for flag, field in _FIT_FLAGS.items() if getattr(args, flag, None) is not None}
    return replace(base, **over)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratelab", description="HME approximation-rate and consistency experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--target")
        p.add_argument("--family", help="e.g. poisson, bernoulli, gaussian:0.5, truncated_poisson:30")
        p.add_argument("--s", type=int)
        p.add_argument("--m", type=_int_list, help="comma-separated cardinalities")
        p.add_argument("--n", type=_int_list, help="comma-separated sample sizes")
        p.add_argument("--tau", type=float, help="fixed gate sharpness (default 20 m^(2/s))")
        p.add_argument("--tau-ladder", type=_float_list, dest="tau_ladder")
        p.add_argument("--p", type=int, dest="p_norm", help="L_p exponent")
        p.add_argument("--mode", choices=["constructive", "fit"])
        p.add_argument("--reps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--x-panels", type=int, dest="x_panels", help="x quadrature panels per axis")
        p.add_argument("--jobs", type=int, help="worker processes for replications")
        p.add_argument("--out", default=f"ratelab-{name}", help="output directory")
        p.add_argument("--no-plot", action="store_true", help="skip the matplotlib figure")
        _add_fit_flags(p)

    p = sub.add_parser("sample", help="export a synthetic dataset as CSV")
    p.add_argument("--target", default="sine")
    p.add_argument("--family", default="poisson")
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit an HME to a CSV dataset")
    p.add_argument("data", help="CSV with columns x_1..x_s,y")
    p.add_argument("--family", default="poisson")
    p.add_argument("--layers", type=_int_list, default=[2], help="comma-separated layer sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out", required=True)
    p.add_argument("--trace-out")
    _add_fit_flags(p)
    return parser


def config_from_args(args) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    base["experiment"] = args.command
    cfg = ExperimentConfig.from_dict(base)
    over = {}
    for key in ("target", "family", "s", "tau", "tau_ladder", "p_norm", "mode", "reps", "seed", "x_panels", "jobs"):
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    if args.m is not None:
        over["m_seq"] = args.m
    if args.n is not None:
        over["n_seq"] = args.n
    cfg = replace(cfg, **over)
    return replace(cfg, fit=_fit_config(args, cfg.fit))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sample":
            target = make_target(args.target, parse_family(args.family), args.s)
            X, y = sample_dataset(target, args.n, args.seed)
            write_dataset_csv(args.out, X, y)
            return 0
        if args.command == "fit":
            X, y = read_dataset_csv(args.data)
            cfg = _fit_config(args, FitConfig(seed=args.seed))
            res = mle(Structure(tuple(args.layers)), parse_family(args.family), X, y, cfg)
            save_model(res.model, args.model_out)
            if args.trace_out:
                res.write_trace_csv(args.trace_out)
            print(f"loglik {res.loglik_trace[-1]:.10g} after {len(res.loglik_trace) - 1} iterations (converged: {res.converged})")
            return 0
        cfg = config_from_args(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"ratelab: error: {exc}", file=sys.stderr)
        return 2
    report = run_experiment(cfg)
    paths = write_outputs(report, cfg, args.out, plot=not args.no_plot)
    sys.stdout.write(report_text(report, cfg))
    print(f"outputs written to {paths['results'].parent}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
