"""Command-line front end.

Machine-readable JSON goes to stdout (or ``--output``), a short human table
to stderr.  Exit codes: 0 success, 1 usage or invalid input, 2 numerical
failure, 3 sampling budget exhausted.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .bounds import lower_bound
from .errors import BudgetExceeded, DegenerateInterval, NotPositiveDefinite, RankDeficient, TiltError
from .estimator import SCHEMA_VERSION, estimate, hoeffding_n
from .harness import (
    DESK_SCALE,
    FULL_SCALE,
    ProblemSpec,
    load_specs,
    make_problem,
    run_benchmark,
    time_scaling,
)
from .probit import load_csv, sample_posterior
from .problem import TruncationProblem, factorize, parse_bounds, read_matrix_csv
from .sampler import DEFAULT_MAX_PROPOSALS, sample
from .tilting import solve_tilting

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BUDGET = 0, 1, 2, 3

SIGMA_FAMILIES = ("example1", "example2", "example3", "example4", "orthant_half",
                  "random_corr", "identity")
PRECISION_FAMILIES = ("example1", "example2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _emit(record: dict, output: str | None):
    text = json.dumps(_clean(record), sort_keys=True, indent=2) + "\n"
    if output:
        with open(output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _table(rows):
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"  {key:<{width}}  {value}", file=sys.stderr)


def _bounds_arg(text, d, name):
    if text is None:
        return None
    if os.path.exists(text):
        vec = read_matrix_csv(text).ravel()
    else:
        try:
            vec = parse_bounds(text)
        except ValueError as exc:
            raise UsageError(f"cannot parse --{name} {text!r}") from exc
    if vec.size == 1 and d and d > 1:
        vec = np.full(d, vec[0])
    return vec


def _problem_from_args(args) -> TruncationProblem:
    given = [x for x in (args.sigma, args.sigma_inv, args.matrix) if x is not None]
    if len(given) != 1:
        raise UsageError("give exactly one of --sigma, --sigma-inv or --matrix")
    family = None
    if args.matrix is not None:
        A = read_matrix_csv(args.matrix)
        m = A.shape[0]
        lower = _bounds_arg(args.lower, m, "lower")
        upper = _bounds_arg(args.upper, m, "upper")
        lower = np.full(m, -np.inf) if lower is None else lower
        upper = np.full(m, np.inf) if upper is None else upper
        return TruncationProblem.from_matrix(A, lower, upper)
    if args.sigma is not None:
        if args.sigma in SIGMA_FAMILIES:
            family = args.sigma
        else:
            sigma = read_matrix_csv(args.sigma)
    else:
        if args.sigma_inv in PRECISION_FAMILIES:
            family = args.sigma_inv
        else:
            prec = read_matrix_csv(args.sigma_inv)
            try:
                np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("precision matrix is not positive definite") from exc
            sigma = np.linalg.inv(prec)
            sigma = 0.5 * (sigma + sigma.T)
    if family is not None:
        if not args.d:
            raise UsageError(f"--d is required with the {family!r} family")
        d = args.d
        lower = _bounds_arg(args.lower, d, "lower")
        upper = _bounds_arg(args.upper, d, "upper")
        if family == "identity":
            spec = ProblemSpec(kind="custom", d=d, sigma=np.eye(d).tolist(),
                               lower=None if lower is None else lower.tolist(),
                               upper=None if upper is None else upper.tolist())
        else:
            spec = ProblemSpec(kind=family, d=d, seed=args.problem_seed,
                               lower=None if lower is None else lower.tolist(),
                               upper=None if upper is None else upper.tolist())
        return make_problem(spec)
    d = sigma.shape[0]
    lower = _bounds_arg(args.lower, d, "lower")
    upper = _bounds_arg(args.upper, d, "upper")
    lower = np.full(d, -np.inf) if lower is None else lower
    upper = np.full(d, np.inf) if upper is None else upper
    return TruncationProblem.from_covariance(sigma, lower, upper)


def _add_problem_args(p):
    g = p.add_argument_group("problem")
    g.add_argument("--sigma", help=f"covariance CSV or family: {', '.join(SIGMA_FAMILIES)}")
    g.add_argument("--sigma-inv", dest="sigma_inv",
                   help=f"precision CSV or family: {', '.join(PRECISION_FAMILIES)}")
    g.add_argument("--matrix", help="CSV of the m x d matrix A")
    g.add_argument("--d", type=int, help="dimension for family problems")
    g.add_argument("--lower", help="comma list or CSV path; one value broadcasts")
    g.add_argument("--upper", help="comma list or CSV path; one value broadcasts")
    g.add_argument("--problem-seed", dest="problem_seed", type=int, default=0,
                   help="seed of random correlation families")
    g.add_argument("--no-reorder", dest="reorder", action="store_false",
                   help="keep the given variable order")


def _add_run_args(p, n_default):
    p.add_argument("--n", type=int, default=n_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="output path (default stdout)")


def _lower_or_none(problem, fp):
    try:
        return lower_bound(problem, fp).log_lower
    except (TiltError, ValueError, np.linalg.LinAlgError) as exc:
        logging.getLogger(__name__).info("lower bound unavailable: %s", exc)
        return None


def cmd_cdf(args) -> int:
    problem = _problem_from_args(args)
    fp = factorize(problem, reorder=args.reorder)
    tilt = solve_tilting(fp)
    log_lower = None if args.no_lower_bound else _lower_or_none(problem, fp)
    res = estimate(fp, args.method, args.n, args.seed, tilt=tilt, log_lower=log_lower,
                   threads=args.threads)
    record = res.to_dict()
    record["tilting"] = tilt.diagnostics()
    _emit(record, args.output)
    _table([("method", res.method), ("estimate", res.estimate), ("rel. error", res.rel_error),
            ("upper bound", math.exp(res.log_upper_bound)),
            ("lower bound", None if log_lower is None else math.exp(log_lower))])
    return EXIT_OK


def cmd_sample(args) -> int:
    problem = _problem_from_args(args)
    fp = factorize(problem, reorder=args.reorder)
    tilt = solve_tilting(fp)
    batch = sample(fp, tilt, args.n, args.seed, max_proposals=args.max_proposals)
    z = batch.samples
    if args.space == "x":
        if fp.Q is None:
            draws = fp.to_constraint_space(z)
        else:
            draws = z @ problem.matrix.T
    else:
        draws = z
    if args.draws:
        np.savetxt(args.draws, draws, delimiter=",", fmt="%.17g")
    meta = {"schema_version": SCHEMA_VERSION, "d": fp.d, "m": fp.m, "space": args.space,
            "log_envelope": tilt.psi_star, "envelope": math.exp(tilt.psi_star),
            "draws_file": args.draws, **batch.metadata()}
    if not args.draws:
        meta["draws"] = draws.tolist()
    _emit(meta, args.output)
    _table([("draws", batch.n_accepted), ("proposals", batch.proposals_used),
            ("acceptance", batch.acceptance_rate)])
    return EXIT_OK


def cmd_probit(args) -> int:
    model = load_csv(args.data, args.response, args.prior_scale)
    post = sample_posterior(model, args.n, args.seed, reorder=args.reorder,
                            max_proposals=args.max_proposals)
    if args.draws:
        with open(args.draws, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(post.names)
            w.writerows(post.beta_samples.tolist())
    record = {"schema_version": SCHEMA_VERSION, "n": args.n, "seed": args.seed,
              "prior_scale": args.prior_scale, "acceptance_rate": post.acceptance_rate,
              "proposals_used": post.proposals_used, "summary": post.summary()}
    _emit(record, args.output)
    _table([(name, f"{s['mean']:+.4f} [{s['q2.5']:+.4f}, {s['q97.5']:+.4f}]")
            for name, s in post.summary().items()] + [("acceptance", post.acceptance_rate)])
    return EXIT_OK


def cmd_bench(args) -> int:
    scale = FULL_SCALE if args.full_scale else DESK_SCALE
    if args.spec:
        specs = load_specs(args.spec)
    else:
        specs = scale["example3"] + scale["example4"]
    n = args.n or scale["n"]
    seeds = list(range(args.seeds)) if args.seeds else scale["seeds"]
    report = run_benchmark(specs, [m.upper() for m in args.methods], n, seeds)
    record = {"schema_version": SCHEMA_VERSION, "n": n, "seeds": seeds,
              "summaries": report.summaries(),
              "cells": [dict(vars(c)) for c in report.cells]}
    if args.scaling:
        ds = [int(x) for x in args.scaling.split(",")] if args.scaling != "default" else (
            scale["orthant_ds"])
        rows, slope = time_scaling(ds, n=n)
        record["time_scaling"] = {"rows": rows, "loglog_slope": slope}
    if args.prefix:
        with open(args.prefix + ".csv", "w") as fh:
            fh.write(report.to_csv())
        with open(args.prefix + ".tsv", "w") as fh:
            fh.write(report.to_tsv())
    _emit(record, args.output)
    _table([(k, "median rel. err. {}".format(v["rel_error"]["median"]))
            for k, v in report.summaries().items()])
    return EXIT_OK


def cmd_bounds(args) -> int:
    problem = _problem_from_args(args)
    fp = factorize(problem, reorder=args.reorder)
    tilt = solve_tilting(fp)
    lb = lower_bound(problem, fp)
    record = {"schema_version": SCHEMA_VERSION, "d": fp.d, "m": fp.m,
              "log_lower_bound": lb.log_lower, "lower_bound": math.exp(lb.log_lower),
              "log_upper_bound": tilt.psi_star, "upper_bound": math.exp(tilt.psi_star),
              "lower_bound_converged": lb.converged, "tilting": tilt.diagnostics()}
    if args.eps is not None:
        record["hoeffding_n"] = hoeffding_n(tilt.psi_star, lb.log_lower, args.eps, args.alpha)
        record["eps"] = args.eps
        record["alpha"] = args.alpha
    _emit(record, args.output)
    _table([("lower bound", record["lower_bound"]), ("upper bound", record["upper_bound"])])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tiltmvn", description="Truncated multivariate normal toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for estimation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("cdf", help="estimate P(l <= AZ <= u)")
    _add_problem_args(p)
    _add_run_args(p, 10_000)
    p.add_argument("--method", type=str.upper, choices=["MET", "SOV"], default="MET")
    p.add_argument("--no-lower-bound", dest="no_lower_bound", action="store_true")
    p.set_defaults(func=cmd_cdf)

    p = sub.add_parser("sample", help="exact draws from the truncated law")
    _add_problem_args(p)
    _add_run_args(p, 1000)
    p.add_argument("--draws", help="CSV path for the draws (otherwise embedded in the JSON)")
    p.add_argument("--space", choices=["x", "z"], default="x",
                   help="x: constrained variables AZ; z: standard coordinates")
    p.add_argument("--max-proposals", dest="max_proposals", type=int,
                   default=DEFAULT_MAX_PROPOSALS)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("probit", help="exact probit posterior draws")
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--prior-scale", dest="prior_scale", type=float, default=5.0)
    p.add_argument("--draws", help="CSV path for the beta draws")
    p.add_argument("--no-reorder", dest="reorder", action="store_false")
    p.add_argument("--max-proposals", dest="max_proposals", type=int,
                   default=DEFAULT_MAX_PROPOSALS)
    _add_run_args(p, 8000)
    p.set_defaults(func=cmd_probit)

    p = sub.add_parser("bench", help="benchmark estimators over problem families")
    p.add_argument("--spec", help="JSON list of problem specs")
    p.add_argument("--methods", nargs="+", default=["MET", "SOV"])
    p.add_argument("--n", type=int)
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="full-size sweeps (slow)")
    p.add_argument("--scaling", help="comma list of d for the timing fit, or 'default'")
    p.add_argument("--prefix", help="write <prefix>.csv and <prefix>.tsv")
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bounds", help="deterministic lower and upper bounds")
    _add_problem_args(p)
    p.add_argument("--eps", type=float, help="half-width for the exact sample size")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--output")
    p.set_defaults(func=cmd_bounds)
    return parser


def _glue_negative_values(argv):
    """Let ``--lower -1,-inf`` through: argparse would read the value as a flag."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok in ("--lower", "--upper"):
            nxt = next(it, None)
            if nxt is not None:
                out.append(f"{tok}={nxt}")
                continue
        out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(_glue_negative_values(argv))
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (UsageError, DegenerateInterval, RankDeficient, NotPositiveDefinite,
            FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TiltError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
