"""Command-line entry points.

Exit codes: 0 success, 2 input or data error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .case import CaseError, Case, ScreeningError, compute_ptdf, load_bundled_case, load_case, screen_inactive_lines
from .conic import SolverOptions, solve
from .evaluation import MODEL_ALIASES, ConfigError, ExperimentConfig, run_experiment
from .formulations import (AmbiguitySpec, DispatchProblem, ExtractionError, ModelSpec, build_model,
                           extract_decision, program_counts)
from .risk import PENALTY_CASES, PieceLimitError
from .tuning import TuneGrid, TuningError, holdout_tune
from .uncertainty import SampleSpec, SamplingError, generate_samples, read_samples, write_samples

EXIT_OK, EXIT_DATA, EXIT_SOLVER = 0, 2, 3


class DataError(Exception):
    pass


class SolverFailure(Exception):
    pass


def _case(path: str | None) -> Case:
    if path is None:
        return load_bundled_case()
    if not Path(path).exists():
        raise DataError(f"case file not found: {path}")
    return load_case(path)


def _provenance(args, case: Case) -> dict:
    return {"version": __version__, "seed": args.seed, "case": case.digest()}


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _problem(args, case: Case) -> DispatchProblem:
    kept = args.kept_lines.split(",") if getattr(args, "kept_lines", None) else None
    if kept:
        ids = {ln.id for ln in case.lines}
        missing = [k for k in kept if k not in ids]
        if missing:
            raise DataError(f"unknown line ids in --kept-lines: {missing}")
    return DispatchProblem(case, kept_lines=kept)


def _samples(path: str, problem: DispatchProblem):
    if not Path(path).exists():
        raise DataError(f"sample file not found: {path}")
    s = read_samples(path)
    if s.index.entries != problem.index.entries:
        raise DataError(f"{path}: columns {s.index.header()} do not match the case layout "
                        f"{problem.index.header()}")
    return s


def _options(args) -> SolverOptions:
    return SolverOptions(feas_tol=args.tol)


# ---------------------------------------------------------------------------
# commands

def cmd_screen(args) -> int:
    case = _case(args.case)
    kept = screen_inactive_lines(case, compute_ptdf(case))
    dropped = [ln.id for ln in case.lines if ln.id not in kept]
    _write_json({"kept": kept, "dropped": dropped, "provenance": _provenance(args, case)}, args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    case = _case(args.case)
    problem = _problem(args, case)
    if args.n < 1:
        raise DataError("--n must be >= 1")
    spec = SampleSpec.draw(case, problem.index, args.rho, args.seed)
    samples = generate_samples(case, problem.index, spec, args.n)
    write_samples(args.out, samples, {"version": __version__})
    return EXIT_OK


def _penalties(args):
    return PENALTY_CASES[args.penalty_case]


def cmd_solve(args) -> int:
    case = _case(args.case)
    problem = _problem(args, case)
    kind = MODEL_ALIASES[args.model]
    if kind != "deterministic" and not args.samples:
        raise DataError("--samples is required for this model")
    samples = _samples(args.samples, problem) if args.samples else None
    amb = AmbiguitySpec(theta=args.theta, tau=args.tau, norm=args.norm,
                        use_wasserstein=kind != "m_dropf", use_moment=kind != "w_dropf")
    spec = ModelSpec(kind, args.approx, _penalties(args), amb, piece_cap=args.piece_cap)
    prog = build_model(problem, spec, samples)
    sol = solve(prog, _options(args))
    if not sol.optimal:
        raise SolverFailure(f"solver status {sol.status}: {sol.info.get('solver_status')}")
    try:
        dec = extract_decision(problem, prog, sol)
    except ExtractionError as exc:
        raise SolverFailure(str(exc)) from None
    out = dec.to_dict()
    out["counts"] = program_counts(prog)
    out["class"] = prog.classification
    out["solve_time_s"] = sol.solve_time
    out["provenance"] = _provenance(args, case)
    _write_json(out, args.out)
    return EXIT_OK


def _grid(args) -> TuneGrid:
    grid = TuneGrid.paper(args.seed) if args.grid_paper else TuneGrid.coarse(args.seed)
    kw = {}
    if args.theta_values:
        kw["theta_values"] = tuple(float(v) for v in args.theta_values.split(","))
    if args.tau_values:
        kw["tau_values"] = tuple(float(v) for v in args.tau_values.split(","))
    if kw:
        grid = TuneGrid(kw.get("theta_values", grid.theta_values), kw.get("tau_values", grid.tau_values),
                        grid.split_fraction, grid.seed)
    return grid


def cmd_tune(args) -> int:
    case = _case(args.case)
    problem = _problem(args, case)
    samples = _samples(args.samples, problem)
    kind = MODEL_ALIASES[args.model]
    grid = _grid(args)
    res = holdout_tune(problem, samples, _penalties(args), grid, kind, args.approx, args.score, args.norm,
                       _options(args))
    prov = _provenance(args, case)
    if args.out:
        res.write_csv(args.out, prov)
    _write_json({"theta": res.theta, "tau": res.tau, "points": len(res.points), "provenance": prov}, None)
    return EXIT_OK


def cmd_experiment(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    raw.setdefault("seed", args.seed)
    cfg = ExperimentConfig.from_dict(raw)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(cfg, threads=args.threads, options=_options(args))
    case = cfg.load_case()
    prov = {"version": __version__, "seed": cfg.seed, "case": case.digest()}
    report.write_csv(out / "report.csv", prov)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "provenance": prov}, indent=2) + "\n")
    sys.stdout.write(report.to_text() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dropf", description="Distributionally robust OPF with dynamic line ratings")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--seed", type=int, default=0, help="master random seed")
    ap.add_argument("--tol", type=float, default=1e-7, help="solver feasibility tolerance")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def case_arg(p):
        p.add_argument("--case", help="case JSON (default: bundled 5-bus)")
        p.add_argument("--kept-lines", help="comma-separated line ids overriding screening")

    p = sub.add_parser("screen", help="identify lines whose limits can never bind")
    p.add_argument("--case")
    p.add_argument("--out")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("sample", help="draw correlated wind/rating samples")
    case_arg(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    model_choices = ["wm", "w", "m", "saa", "det"]
    p = sub.add_parser("solve", help="solve one dispatch model")
    case_arg(p)
    p.add_argument("--samples")
    p.add_argument("--model", choices=model_choices, required=True)
    p.add_argument("--approx", choices=["exact", "grouped", "separable"], default="separable")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--norm", choices=["l1", "l2", "linf"], default="l2")
    p.add_argument("--penalty-case", type=int, choices=[1, 2, 3], default=1)
    p.add_argument("--piece-cap", type=int, default=1_000_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("tune", help="hold-out selection of theta and tau")
    case_arg(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--model", choices=["wm", "w", "m"], required=True)
    p.add_argument("--approx", choices=["exact", "grouped", "separable"], default="separable")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--grid-coarse", action="store_true", help="theta step 0.05, tau step 1 (default)")
    g.add_argument("--grid-paper", action="store_true", help="theta step 0.01, tau step 1")
    p.add_argument("--theta-values", help="explicit comma-separated theta grid")
    p.add_argument("--tau-values", help="explicit comma-separated tau grid")
    p.add_argument("--score", choices=["realized", "objective"], default="realized")
    p.add_argument("--norm", choices=["l1", "l2", "linf"], default="l2")
    p.add_argument("--penalty-case", type=int, choices=[1, 2, 3], default=1)
    p.add_argument("--out", help="tuning report CSV")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("experiment", help="repeated DLR/SLR comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SolverFailure, TuningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PieceLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CaseError, ScreeningError, ConfigError, SamplingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
