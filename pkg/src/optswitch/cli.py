"""Command-line front end.

    optswitch validate  --model M
    optswitch solve {lattice,nswitch,penalized,lsmc,pde} --model M [flags] --out DIR
    optswitch crosscheck --model M [flags] --out DIR
    optswitch strategy  --model M [--M paths] --out DIR
    optswitch simulate  --model M --M paths --out DIR
    optswitch acceptance [--only 1 2 ...]

Exit codes: 0 success, 2 invalid model or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import pydantic

from . import __version__
from .acceptance import crosscheck, run_all
from .lattice import build_binomial_chain, n_switch_levels, solve_fixed_point
from .lsmc import RegressionBasis, solve_lsmc_fixed_point, solve_lsmc_n_switch
from .mc import simulate_euler
from .model import ModelValidationError, SwitchingModel, load_model, validate_model
from .pde import SpaceGrid, solve_qvi_fd
from .penalized import DEFAULT_KMAX, DEFAULT_PENALTIES, PenaltySchedule, penalty_sweep, solve_penalized
from .strategy import execute, extract_rule, write_aggregate_json

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# Artifacts
# --------------------------------------------------------------------------- #


def _dump(path: Path, doc: Any) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for byte-reproducible output directories
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.isoformat(timespec="seconds")


def write_manifest(out: Path, args: argparse.Namespace, model: Optional[SwitchingModel]) -> Path:
    """Record the run; everything except ``timestamp`` is a pure function of the inputs."""
    params = {k: getattr(args, k, None) for k in ("N", "J", "M", "seed", "degree", "penalties", "theta", "n", "kmax")}
    doc = {
        "model": str(args.model),
        "command": " ".join(c for c in (args.command, getattr(args, "method", None)) if c),
        "parameters": params,
        "grid": None if model is None else {"T": model.grid.T, "N": model.grid.N},
        "out": str(out),
        "version": __version__,
        "timestamp": _timestamp(),
    }
    path = out / "manifest.json"
    _dump(path, doc)
    return path


def write_summary(out: Path, method: str, y0: Sequence[float], extra: Optional[dict] = None) -> None:
    doc = {"Y0": {str(i + 1): float(v) for i, v in enumerate(y0)}, "method": method,
           "manifest_ref": "manifest.json"}
    if extra:
        doc.update(extra)
    _dump(out / "summary.json", doc)


def _model(args: argparse.Namespace) -> SwitchingModel:
    model = load_model(args.model)
    if args.N is not None:
        model = model.with_grid(N=args.N)
    report = validate_model(model)
    if report:
        raise ModelValidationError(report.violations)
    return model


def _outdir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_validate(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    report = validate_model(model)
    for v in report:
        print(v)
    if report:
        return EXIT_INVALID
    print(f"valid: q={model.q}, T={model.grid.T}, N={model.grid.N}")
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    model = _model(args)
    out = _outdir(args)
    write_manifest(out, args, model)
    method = args.method
    extra: dict[str, Any] = {}
    if method in ("lattice", "nswitch", "penalized"):
        chain = build_binomial_chain(model.diffusion, model.grid)
        if method == "lattice":
            field = solve_fixed_point(chain, model)
        elif method == "nswitch":
            field = n_switch_levels(chain, model, args.n)[-1]
            extra["n"] = args.n
        else:
            sched = PenaltySchedule(tuple(args.penalties), kmax=args.kmax)
            sched.check()
            rep = penalty_sweep(chain, model, sched)
            rep.to_csv(out / "convergence.csv")
            field = solve_penalized(chain, model, sched.penalties[-1], sched.kmax, sched.tol)
            extra.update(penalty=sched.penalties[-1], slope=rep.slope)
            if not all(rep.converged):
                write_summary(out, method, field.root, extra)
                raise NumericalFailure("penalized_solver.solve_penalized: Picard iteration hit kmax "
                                       f"(converged flags {rep.converged})")
        field.to_csv(out / "values.csv")
        y0 = field.root
    elif method == "pde":
        grid = SpaceGrid.default(model, J=args.J)
        field = solve_qvi_fd(model, grid, args.theta)
        field.to_csv(out / "values.csv")
        y0 = field.at(float(model.diffusion.x0[0]))
        extra.update(J=args.J, theta=args.theta)
    else:
        batch = simulate_euler(model.diffusion, model.grid, args.M, args.seed)
        basis = RegressionBasis(degree=args.degree)
        if args.n is None:
            field = solve_lsmc_fixed_point(batch, model, basis, store_values=False)
        else:
            field = solve_lsmc_n_switch(batch, model, basis, args.n)
        field.to_csv(out / "values.csv")
        field.coefficients_to_csv(out / "coefficients.csv")
        y0 = field.root
        extra.update(stderr={str(i + 1): float(s) for i, s in enumerate(field.root_stderr)},
                     rank_deficient_steps=field.rank_deficient_steps)
    write_summary(out, method, y0, extra)
    for i, v in enumerate(y0):
        print(f"Y{i + 1}_0 = {v:.10g}")
    return EXIT_OK


def cmd_crosscheck(args: argparse.Namespace) -> int:
    model = _model(args)
    out = _outdir(args)
    write_manifest(out, args, model)
    cc = crosscheck(model, None, args.J, args.M, args.seed, args.degree, args.penalties[-1], args.theta)
    _dump(out / "crosscheck.json", {"values": cc.values, "lsmc_stderr": cc.stderr, "pairs": cc.rows(),
                                    "pass": cc.ok})
    write_summary(out, "crosscheck", [cc.values["lattice"]], {"methods": cc.values})
    width = max(len(m) for m in cc.methods)
    print(" " * width + "".join(f"{m:>12}" for m in cc.methods))
    for a, ma in enumerate(cc.methods):
        cells = "".join(f"{cc.gaps[a, b]:>11.3g}" + (" " if cc.passed[a, b] else "!")
                        for b in range(len(cc.methods)))
        print(f"{ma:>{width}}{cells}")
    print("all pairs pass" if cc.ok else "some pairs exceed tolerance (marked !)")
    return EXIT_OK if cc.ok else 1


def cmd_strategy(args: argparse.Namespace) -> int:
    model = _model(args)
    out = _outdir(args)
    write_manifest(out, args, model)
    chain = build_binomial_chain(model.diffusion, model.grid)
    fp = solve_fixed_point(chain, model)
    rule = extract_rule(fp, model)
    y0 = float(fp.root[model.i0])
    exact = execute(rule, chain, model, model.i0)
    batch = simulate_euler(model.diffusion, model.grid, args.M, args.seed)
    rep = execute(rule, batch, model, model.i0)
    rep.switch_log_to_csv(out / "switch_log.csv")
    write_aggregate_json(out / "aggregate.json", rep, y0)
    write_summary(out, "strategy", fp.root, {"chain_profit": exact.mean, "path_profit": rep.mean,
                                            "path_stderr": rep.stderr, "clamped_paths": rep.clamped})
    print(f"Y0 = {y0:.10g}, chain profit = {exact.mean:.10g}, path profit = {rep.mean:.6g} +/- {rep.stderr:.2g}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    model = _model(args)
    out = _outdir(args)
    write_manifest(out, args, model)
    batch = simulate_euler(model.diffusion, model.grid, args.M, args.seed)
    batch.to_csv(out / "paths.csv")
    print(f"wrote {batch.M} paths to {out / 'paths.csv'}")
    return EXIT_OK


def cmd_acceptance(args: argparse.Namespace) -> int:
    results = run_all(args.only)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else 1


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--N", type=int, default=None, help="time steps (overrides the config)")
    p.add_argument("--J", type=int, default=400, help="space intervals for the PDE grid")
    p.add_argument("--M", type=int, default=100_000, help="simulated paths")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--degree", type=int, default=3, help="LSMC polynomial degree")
    p.add_argument("--penalties", type=float, nargs="+", default=list(DEFAULT_PENALTIES))
    p.add_argument("--theta", type=float, default=1.0, help="PDE time-stepping parameter in [1/2, 1]")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optswitch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model config")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="solve with one method")
    p.add_argument("method", choices=["lattice", "nswitch", "penalized", "lsmc", "pde"])
    _model_flags(p)
    p.add_argument("--n", type=int, default=None, help="switch budget (nswitch, lsmc)")
    p.add_argument("--kmax", type=int, default=DEFAULT_KMAX, help="Picard sweep cap (penalized)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("crosscheck", help="pairwise agreement of all four methods")
    _model_flags(p)
    p.set_defaults(func=cmd_crosscheck)

    p = sub.add_parser("strategy", help="extract and execute the lattice switching rule")
    _model_flags(p)
    p.set_defaults(func=cmd_strategy)

    p = sub.add_parser("simulate", help="dump simulated paths")
    _model_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("acceptance", help="run the acceptance criteria")
    p.add_argument("--only", type=int, nargs="+", default=None, metavar="K")
    p.set_defaults(func=cmd_acceptance, model=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "solve" and args.method == "nswitch" and args.n is None:
        parser.error("solve nswitch needs --n")
    try:
        return args.func(args)
    except ModelValidationError as exc:
        for v in exc.violations:
            print(f"model.validate_model: {v}", file=sys.stderr)
        return EXIT_INVALID
    except (pydantic.ValidationError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"model.load_model: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
