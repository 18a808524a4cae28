"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure
(failed certificate, divergence, singular system, failed selftest).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from typing import Optional, Sequence

import numpy as np

from . import acceptance, bilevel, counterexamples, specfile
from .core import (
    DimensionMismatch,
    InadmissibleStepSize,
    MonodiffError,
    NonPositiveModulus,
    UnknownRegistryName,
)
from .duality import primal_from_dual, solve_dual_and_differentiate
from .implicit import differentiate, fd_jacobian
from .saddle import MinMaxSpec, minmax_solve_and_differentiate, pd_solve_and_differentiate
from .solver import fixed_point_solve

USAGE_ERRORS = (specfile.SpecFileError, DimensionMismatch, InadmissibleStepSize, NonPositiveModulus,
                UnknownRegistryName, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _emit(payload: dict, out=None):
    out = out or sys.stdout
    out.write(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
    out.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def parse_vector(text: Optional[str]) -> np.ndarray:
    """Comma-separated numbers; an empty string gives an empty vector."""
    if text is None:
        return None
    text = text.strip()
    if not text:
        return np.zeros(0)
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as comma-separated numbers")


def _matrix_csv(path, J, prefix="theta"):
    J = np.atleast_2d(J)
    _write_csv(path, [f"{prefix}_{j}" for j in range(J.shape[1])], J.tolist())


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args):
    spec, gamma = specfile.problem_from_dict(specfile.load(args.spec))
    gamma = args.gamma if args.gamma is not None else gamma
    rep = fixed_point_solve(spec, parse_vector(args.theta), x0=parse_vector(args.x0), tol=args.tol,
                            max_iter=args.max_iter, gamma=gamma)
    _emit(rep.to_dict())
    return 0


def cmd_diff(args):
    spec, gamma = specfile.problem_from_dict(specfile.load(args.spec))
    gamma = args.gamma if args.gamma is not None else gamma
    theta = parse_vector(args.theta)
    rep, ij, cert = differentiate(spec, theta, gamma=gamma, tol=args.tol, certify=args.certify,
                                  max_iter=args.max_iter)
    out = {
        "x_star": rep.x_star,
        "residual_norm": rep.residual_norm,
        "gamma_used": rep.gamma_used,
        "J": ij.J,
        "alternatives": list(ij.alternatives),
        "extreme_set_size": ij.extreme_set_size,
        "condition_estimate": ij.condition_estimate,
    }
    code = 0
    if cert is not None:
        out["certificate"] = cert.to_dict()
        code = 0 if cert.verdict else 2
    if args.check_fd:
        fd = fd_jacobian(spec, theta, gamma=rep.gamma_used, h=args.fd_step, max_iter=args.max_iter)
        out["fd"] = {"J_fd": fd, "max_abs_error": float(np.max(np.abs(fd - ij.J), initial=0.0)),
                     "step": args.fd_step}
    if args.csv:
        _matrix_csv(args.csv, ij.J)
    _emit(out)
    return code


def cmd_dual_solve(args):
    cspec, gamma = specfile.composite_from_dict(specfile.load(args.spec))
    gamma = args.gamma if args.gamma is not None else gamma
    theta = parse_vector(args.theta)
    sol = solve_dual_and_differentiate(cspec, theta, gamma=gamma, tol=args.tol, max_iter=args.max_iter)
    x, (Jp, alts) = primal_from_dual(cspec, theta, sol.y_star, sol.J_dual)
    a_d, b_d, (lo, hi) = sol.constants
    _emit({
        "y_star": sol.y_star, "x_star": x,
        "J_dual": sol.J_dual.J, "J_primal": Jp,
        "J_dual_alternatives": list(sol.J_dual.alternatives), "J_primal_alternatives": list(alts),
        "dual_constants": {"alpha_dual": a_d, "beta_dual": b_d, "gamma_range": [lo, hi]},
        "certificate": sol.certificate.to_dict(), "report": sol.report.to_dict(),
    })
    return 0 if sol.certificate.verdict else 2


def cmd_saddle_solve(args):
    spec, gamma = specfile.saddle_from_dict(specfile.load(args.spec), args.kind)
    gamma = args.gamma if args.gamma is not None else gamma
    theta = parse_vector(args.theta)
    if isinstance(spec, MinMaxSpec):
        sol = minmax_solve_and_differentiate(spec, theta, gamma=gamma, tol=args.tol, max_iter=args.max_iter)
    else:
        sol = pd_solve_and_differentiate(spec, theta, gamma=gamma, tol=args.tol, max_iter=args.max_iter)
    _emit({"x_star": sol.x_star, "y_star": sol.y_star, "J": sol.J.J,
           "alternatives": list(sol.J.alternatives), "certificate": sol.certificate.to_dict(),
           "report": sol.report.to_dict()})
    return 0


def cmd_bilevel_train(args):
    data = bilevel.read_dataset(args.dataset)
    rng = np.random.default_rng(args.seed)
    theta0 = parse_vector(args.theta0) if args.theta0 else None
    tr = bilevel.bilevel_train(data, args.s, args.n, theta0, steps=args.steps, lr=args.lr,
                               tol=args.tol, rng=rng)
    if args.csv:
        rows = [(k, tr.losses[k], tr.grad_norms[k], tr.steps_taken[k - 1] if k else 0.0)
                for k in range(len(tr.losses))]
        _write_csv(args.csv, ["step", "loss", "grad_norm", "step_size"], rows)
    _emit({"theta": tr.theta, "K": tr.theta.reshape(args.s, args.n), "losses": tr.losses,
           "grad_norms": tr.grad_norms, "step_sizes": tr.steps_taken})
    return 0


def cmd_unroll_compare(args):
    spec, gamma = specfile.problem_from_dict(specfile.load(args.spec))
    gamma = args.gamma if args.gamma is not None else gamma
    res = bilevel.unroll_compare(spec, parse_vector(args.theta), args.k, gamma=gamma, tol=min(args.tol, 1e-12))
    if args.csv:
        _write_csv(args.csv, ["iteration", "max_abs_error"], list(enumerate(res["errors"])))
    res["final_error"] = res["errors"][-1]
    _emit(res)
    return 0


def cmd_counterexample(args):
    rep = counterexamples.report(args.half_width, args.r, args.samples, args.seed)
    angles, quot = rep.pop("angles"), rep.pop("quotients")
    if args.csv:
        _write_csv(args.csv, ["angle", "quotient"], zip(angles, quot))
    _emit(rep)
    return 0


def cmd_selftest(args):
    results = acceptance.run_all(seed=args.seed, gamma_scale=args.gamma_scale,
                                 jacobian_shift=args.jacobian_shift, echo=print)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} criteria passed")
    return 0 if failed == 0 else 2


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--tol", type=float, default=1e-10, help="solver tolerance (default 1e-10)")
    common.add_argument("--max-iter", type=int, default=1_000_000, help="iteration cap")

    problem = argparse.ArgumentParser(add_help=False)
    problem.add_argument("--spec", required=True, help="JSON problem file")
    problem.add_argument("--theta", default="", help="comma-separated parameter vector")
    problem.add_argument("--gamma", type=float, default=None, help="step size (default from moduli)")

    parser = _Parser(prog="monodiff", description="Solve and differentiate monotone inclusions.",
                     epilog=specfile.__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", parents=[common, problem], help="forward-backward fixed point")
    p.add_argument("--x0", default=None, help="starting point")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("diff", parents=[common, problem], help="implicit Jacobian of the solution")
    p.add_argument("--check-fd", action="store_true", help="compare with central finite differences")
    p.add_argument("--certify", action="store_true", help="contraction certificate; exit 2 if it fails")
    p.add_argument("--fd-step", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("--csv", default=None, help="write J to this CSV file")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("dual-solve", parents=[common, problem], help="solve through the Fenchel dual")
    p.set_defaults(func=cmd_dual_solve)

    p = sub.add_parser("saddle-solve", parents=[common, problem], help="primal-dual or min-max solution")
    p.add_argument("--kind", choices=("pd", "minmax"), default=None, help="override the file's kind")
    p.set_defaults(func=cmd_saddle_solve)

    p = sub.add_parser("bilevel-train", parents=[common], help="learn a sparsity prior K")
    p.add_argument("--dataset", required=True, help="CSV, one datum per row: u then uhat")
    p.add_argument("--s", type=int, required=True, help="rows of K")
    p.add_argument("--n", type=int, required=True, help="columns of K (signal length)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.5, help="initial step of the backtracking search")
    p.add_argument("--theta0", default=None, help="initial K entries, row-major")
    p.add_argument("--csv", default=None, help="write the loss trace here")
    p.set_defaults(func=cmd_bilevel_train, tol=1e-12)

    p = sub.add_parser("unroll-compare", parents=[common, problem], help="unrolled vs implicit Jacobian")
    p.add_argument("--k", type=int, required=True, help="number of unrolled iterations")
    p.add_argument("--csv", default=None, help="write the error trace here")
    p.set_defaults(func=cmd_unroll_compare)

    p = sub.add_parser("counterexample", parents=[common], help="smoothed-square gauge report")
    p.add_argument("--r", type=float, default=0.25, help="corner radius (default 0.25)")
    p.add_argument("--half-width", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--csv", default=None, help="write sampled contraction quotients here")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("selftest", parents=[common], help="run the acceptance suite")
    p.add_argument("--gamma-scale", type=float, default=1.0, help="fault injection: scale the step size")
    p.add_argument("--jacobian-shift", type=float, default=0.0, help="fault injection: shift forward Jacobians")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        kind = "numerical failure: " if code == 2 else ""
        print(f"monodiff {args.command}: {kind}{type(exc).__name__}: {exc}", file=sys.stderr)
        if isinstance(exc, specfile.SpecFileError):
            print(specfile.__doc__, file=sys.stderr)
        return code


def exit_code_for(exc: BaseException) -> Optional[int]:
    """1 for bad input, 2 for numerical failure, ``None`` for anything unexpected."""
    if isinstance(exc, np.linalg.LinAlgError):
        return 2
    if isinstance(exc, (UsageError,) + USAGE_ERRORS):
        return 1
    if isinstance(exc, MonodiffError):
        return 2
    return None

if __name__ == "__main__":
    sys.exit(main())
