"""Command-line interface: ``doublecox fit|simulate|calibrate|study``.

Exit codes
----------
0 success, 2 bad input file, 3 fit did not converge, 4 interval failure,
5 censoring calibration failure, 6 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, load_sim_config, split_list
from .estimation import ConditioningError, FitOptions, InvalidDataError, fit
from .intervals import BracketError, profile_interval, se_interval
from .model import Family, ModelSpec
from .simulation import (
    CalibrationError,
    DatasetFormatError,
    calibrate_theta,
    generate_dataset,
    write_dataset_csv,
)
from .simulation import read_dataset_csv
from .study import load_study_config, run_grid, write_report

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NONCONVERGENCE = 3
EXIT_INTERVAL = 4
EXIT_CALIBRATION = 5
EXIT_CONFIG = 6

log = logging.getLogger("doublecox")


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def _resolve_covariates(text: str | None, available: Sequence[str], flag: str) -> tuple[int, ...]:
    if text is None:
        return ()
    names = split_list(text)
    idx = []
    for name in names:
        if name not in available:
            raise InvalidDataError(f"{flag}: unknown covariate {name!r}; columns are {list(available)}")
        idx.append(list(available).index(name))
    return tuple(idx)


def cmd_fit(args: argparse.Namespace) -> int:
    try:
        data = read_dataset_csv(args.dataset)
    except (OSError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        scale_text = args.scale_cov if args.scale_cov is not None else ",".join(data.covariate_names)
        scale = _resolve_covariates(scale_text, data.covariate_names, "--scale-cov")
        shape = _resolve_covariates(args.shape_cov, data.covariate_names, "--shape-cov")
        spec = ModelSpec(Family.parse(args.family), scale, shape, frailty=not args.no_frailty)
        opts = FitOptions(multistart=args.multistart, seed=args.seed)
        result = fit(data, spec, opts)
    except (InvalidDataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    names = result.param_names
    est = result.estimates.to_array()
    se = result.standard_errors() if result.covariance is not None else np.full(len(names), np.nan)
    rows = []
    interval_failed = False
    if result.covariance is None and result.converged:
        interval_failed = True
        print(f"warning: no covariance: {result.covariance_error}", file=sys.stderr)
    wanted_pl: set[str] = set()
    if args.profile is not None:
        wanted_pl = set(names) if args.profile == "all" else set(split_list(args.profile))
        unknown = wanted_pl - set(names)
        if unknown:
            print(f"error: --profile: unknown parameter(s) {sorted(unknown)}", file=sys.stderr)
            return EXIT_BAD_INPUT
    for j, name in enumerate(names):
        row = {"parameter": name, "estimate": est[j], "se": se[j]}
        fixed = j in result.fixed
        row["se_lower"] = row["se_upper"] = row["pl_lower"] = row["pl_upper"] = float("nan")
        if result.converged and result.covariance is not None and not fixed:
            try:
                iv = se_interval(result, j, args.level)
                row["se_lower"], row["se_upper"] = iv.lower, iv.upper
            except (ConditioningError, ArithmeticError, ValueError) as exc:
                interval_failed = True
                print(f"warning: SE interval for {name}: {exc}", file=sys.stderr)
        if result.converged and name in wanted_pl and not fixed:
            try:
                iv = profile_interval(data, spec, result, j, args.level, FitOptions(seed=args.seed))
                row["pl_lower"], row["pl_upper"] = iv.lower, iv.upper
                if not iv.reliable:
                    print(f"warning: PL interval for {name} flagged unreliable", file=sys.stderr)
            except (BracketError, ArithmeticError, ValueError) as exc:
                interval_failed = True
                print(f"warning: PL interval for {name}: {exc}", file=sys.stderr)
        rows.append(row)

    out = io.StringIO()
    out.write(
        f"family: {spec.family.value}  subjects: {len(data)}  clusters: {data.n_clusters}"
        f"  events: {data.n_events}\n"
    )
    out.write(f"log-likelihood: {result.loglik:.10g}\n")
    out.write(f"converged: {'yes' if result.converged else 'no'}  iterations: {result.iterations}")
    out.write(f"  sigma2 at boundary: {'yes' if result.at_boundary else 'no'}\n")
    pct = f"{100 * args.level:g}%"
    header = ["parameter", "estimate", "se", f"SE {pct} lower", "upper"]
    if wanted_pl:
        header += [f"PL {pct} lower", "upper"]
    width = max(12, *(len(n) + 2 for n in names))
    out.write(f"{header[0]:<{width}}" + "".join(f"{h:>14}" for h in header[1:]) + "\n")
    for r in rows:
        vals = [r["estimate"], r["se"], r["se_lower"], r["se_upper"]]
        if wanted_pl:
            vals += [r["pl_lower"], r["pl_upper"]]
        out.write(f"{r['parameter']:<{width}}" + "".join(f"{_fmt(float(v)):>14}" for v in vals) + "\n")
    sys.stdout.write(out.getvalue())

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["parameter", "estimate", "se", "se_lower", "se_upper", "pl_lower", "pl_upper"]
            w.writerow(cols)
            for r in rows:
                w.writerow([r["parameter"]] + [repr(float(r[c])) for c in cols[1:]])

    if not result.converged:
        print("error: optimizer did not converge", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    if interval_failed:
        return EXIT_INTERVAL
    return EXIT_OK


def _load_sim(path) -> object:
    try:
        return load_sim_config(path)
    except OSError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_sim(args.config)
    try:
        plan = calibrate_theta(config)
    except CalibrationError as exc:
        print(f"error: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    data = generate_dataset(config, plan)
    write_dataset_csv(data, args.out)
    theta = "none (no censoring)" if plan.theta is None else f"{plan.theta:.10g}"
    print(f"theta: {theta}")
    print(f"empirical censoring rate: {1.0 - data.n_events / len(data):.6g} (target {config.p_cens:g})")
    print(f"wrote {len(data)} subjects in {data.n_clusters} clusters to {args.out}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _load_sim(args.config)
    try:
        plan = calibrate_theta(config)
    except CalibrationError as exc:
        print(f"error: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    theta = "none (no censoring)" if plan.theta is None else f"{plan.theta:.10g}"
    print(f"theta: {theta}")
    print(f"Monte-Carlo censoring rate: {plan.achieved_rate_estimate:.6g} (target {config.p_cens:g})")
    return EXIT_OK


def cmd_study(args: argparse.Namespace) -> int:
    try:
        study = load_study_config(args.config)
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.replications is not None:
        try:
            study = study.replace(replications=args.replications)
        except ValueError as exc:
            raise ConfigError(str(exc), "replications") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(summary):
        c = summary.cell
        state = summary.failure or f"{summary.used}/{summary.replications} replications used"
        print(
            f"cell {c.index}: {c.family.value} n={c.n} N_cl={c.n_clusters} p_cens={c.p_cens:g} "
            f"sigma2={c.sigma2:g} signs={c.sign_pattern}: {state}",
            flush=True,
        )

    summaries = run_grid(study, out_dir, workers=args.workers, resume=args.resume, on_cell=progress)
    ext = "csv" if args.format == "csv" else "md"
    report = out_dir / f"report.{ext}"
    write_report(summaries, args.format, report)
    print(f"report: {report}")
    if all(s.failure is not None for s in summaries):
        print("error: every cell failed", file=sys.stderr)
        return EXIT_CALIBRATION
    return EXIT_OK


def _default_workers() -> int:
    raw = os.environ.get("DOUBLECOX_WORKERS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doublecox",
        description="Double-Cox shared gamma-frailty survival models: fitting, intervals, simulation.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a dataset CSV and print estimates and intervals")
    p.add_argument("dataset", help="CSV with columns time, event, cluster and covariates")
    p.add_argument("--family", default="weibull", choices=["weibull", "gompertz"])
    p.add_argument(
        "--scale-cov",
        metavar="NAMES",
        help="comma-separated covariates in the scale term (default: all covariate columns)",
    )
    p.add_argument(
        "--shape-cov",
        metavar="NAMES",
        help="comma-separated covariates in the shape term (omit for the single-Cox model)",
    )
    p.add_argument("--no-frailty", action="store_true", help="fit without the shared frailty")
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--out", metavar="PATH", help="also write the estimate table as CSV")
    p.add_argument(
        "--profile",
        nargs="?",
        const="all",
        metavar="NAMES",
        help="add profile-likelihood intervals (all parameters, or a comma-separated list)",
    )
    p.add_argument("--seed", type=int, default=0, help="seed for multistart restarts")
    p.add_argument("--multistart", type=int, default=0, help="extra random restarts (default 0)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="calibrate censoring and write a synthetic dataset CSV")
    p.add_argument("config", help="simulation config file (key = value lines)")
    p.add_argument("out", help="output CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="print the censoring bound theta for a simulation config")
    p.add_argument("config", help="simulation config file (key = value lines)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("study", help="run a Monte-Carlo simulation study")
    p.add_argument("config", help="study config file, or a preset name such as paper-desk")
    p.add_argument("out_dir", help="directory for the report and per-cell results")
    p.add_argument(
        "--workers",
        type=int,
        default=_default_workers(),
        help="worker processes (default: $DOUBLECOX_WORKERS or 1)",
    )
    p.add_argument("--format", choices=["csv", "markdown"], default="csv", help="report format")
    p.add_argument("--resume", action="store_true", help="reuse completed cells from an earlier run")
    p.add_argument("--replications", type=int, help="override the configured replication count")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" (key {exc.key!r})" if exc.key else ""
        print(f"error: configuration{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
