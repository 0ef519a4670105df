"""Command-line driver: validate, solve, recover, Monte Carlo and oracle checks.

Exit codes: 0 success, 2 configuration or validation error, 3 the solver did
not converge (outputs are still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, build_problem, build_scheme, effective_config, parse_overrides,
                     solver_options, write_config)
from .fixedpoint import (MAX_ITER_LINEAR, MAX_ITER_NONLINEAR, SolveReport, sinkhorn_generalized,
                         sinkhorn_linear, write_history_csv)
from .identities import format_table, run_battery
from .integrators import FactorTrajectory
from .io import FormatError, read_trajectory, write_trajectory
from .montecarlo import checkpoint_errors
from .oracle import bridge_from_static, essential_support, projective_gap
from .plots import CONFIG_NAME, HISTORY_NAME, SOLUTION_DIR, SUMMARY_NAME, emit_plots
from .problem import ConstantCost, ConstantMatrix, ValidationError, ZeroDrift, validate
from .recovery import build_solution, export_solution, summary_lines

logger = logging.getLogger("sbridge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_NUMERICAL = 4
COMMANDS = ("validate", "solve", "recover", "montecarlo", "oracle-compare", "identities")
FACTOR_DIR = "factors"
ORACLE_RTOL = 1e-3


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbridge", description="Grid solver for control-affine bridges.")
    p.add_argument("--version", action="version", version=f"sbridge {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", type=Path, default=Path("sbridge-out"), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config, else 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on data parallelism; recorded in the effective config")
    p.add_argument("--force-nonlinear", action="store_true",
                   help="use the generalized recursion even when the channels coincide")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _emit(lines, path: Path | None = None) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _load(args):
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        overrides["threads"] = str(args.threads)
    cfg = effective_config(args.config, overrides)
    base = args.config.parent if args.config is not None else Path.cwd()
    for key in ("rho0", "rho1"):
        # absolute table paths keep the effective config usable from any directory
        kind, _, arg = cfg[key].partition(":")
        if kind == "table" and not Path(arg).is_absolute():
            cfg[key] = f"table:{(base / arg).resolve()}"
    problem = build_problem(cfg)
    return cfg, problem, validate(problem)


# ---------------------------------------------------------------------------
# solve / recover


def _solve(cfg, problem, vreport, force_nonlinear: bool) -> SolveReport:
    scheme = build_scheme(cfg)
    opts = solver_options(cfg)
    if force_nonlinear or not vreport.is_channel_coincident:
        return sinkhorn_generalized(problem, scheme, tol=opts["tol"],
                                    max_iter=opts["max_iter"] or MAX_ITER_NONLINEAR,
                                    guess=opts["guess"], damping=opts["damping"])
    if opts["damping"] != 1:
        logger.warning("solver.damping is ignored by the linear recursion")
    return sinkhorn_linear(problem, scheme, tol=opts["tol"], max_iter=opts["max_iter"] or MAX_ITER_LINEAR,
                           guess=opts["guess"], check=False)


def _write_factors(out: Path, report: SolveReport) -> None:
    for name, traj in (("phi", report.phi), ("phihat", report.phihat)):
        write_trajectory(out / FACTOR_DIR / name, traj.grid, traj.values, traj.times, name)


def _read_factors(out: Path, problem) -> tuple[FactorTrajectory, FactorTrajectory]:
    trajs = []
    for name, direction in (("phi", "backward"), ("phihat", "forward")):
        try:
            frames, times = read_trajectory(out / FACTOR_DIR / name)
        except (OSError, FormatError) as exc:
            raise CommandError(EXIT_CONFIG, f"cannot read saved factors: {exc}") from exc
        if not np.allclose(times, problem.grid.times(), rtol=0, atol=1e-12):
            raise CommandError(EXIT_CONFIG, "saved factors do not match the configured time nodes")
        trajs.append(FactorTrajectory(problem.grid, direction, frames))
    return trajs[0], trajs[1]


def _summary_fields(out: Path) -> dict[str, str]:
    path = out / SUMMARY_NAME
    if not path.is_file():
        raise CommandError(EXIT_CONFIG, f"{path} not found; run solve first")
    pairs = (ln.split("=", 1) for ln in path.read_text().splitlines() if "=" in ln)
    return {k: v for k, v in pairs}


def _finish(out: Path, report: SolveReport, problem, vreport) -> int:
    write_history_csv(out / HISTORY_NAME, report.history)
    head = vreport.lines()
    if report.phi is None:
        _emit(head + [f"time_nodes={problem.grid.num_steps + 1}"] + report.lines(), out / SUMMARY_NAME)
        return EXIT_NO_CONVERGENCE
    solution = build_solution(report, problem)
    _write_factors(out, report)
    export_solution(solution, out / SOLUTION_DIR, summary=False)
    _emit(head + summary_lines(solution), out / SUMMARY_NAME)
    emit_plots(out)
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_validate(args) -> int:
    cfg, problem, vreport = _load(args)
    _emit(vreport.lines())
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg, problem, vreport = _load(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / CONFIG_NAME, cfg)
    try:
        report = _solve(cfg, problem, vreport, args.force_nonlinear)
    except ArithmeticError as exc:
        _emit(vreport.lines() + ["converged=false", f"message={type(exc).__name__}: {exc}"],
              out / SUMMARY_NAME)
        return EXIT_NUMERICAL
    return _finish(out, report, problem, vreport)


def _solution_from_disk(out: Path, problem):
    fields = _summary_fields(out)
    phi, phihat = _read_factors(out, problem)
    report = SolveReport(fields.get("converged") == "true", int(fields.get("iterations", 0)), phi, phihat,
                         [], fields.get("regime", "linear"), Counter())
    return build_solution(report, problem)


def cmd_recover(args) -> int:
    cfg, problem, vreport = _load(args)
    solution = _solution_from_disk(args.out, problem)
    export_solution(solution, args.out / SOLUTION_DIR, summary=False)
    lines = [f"{k}={v!r}" for k, v in sorted(solution.diagnostics.items())]
    _emit(lines, args.out / "recovery.txt")
    return EXIT_OK


def _ensure_solution(args, cfg, problem, vreport):
    out = args.out
    if (out / FACTOR_DIR).is_dir():
        return _solution_from_disk(out, problem)
    code = cmd_solve(args)
    if code == EXIT_NUMERICAL or not (out / FACTOR_DIR).is_dir():
        raise CommandError(code, "no solution to work with")
    return _solution_from_disk(out, problem)


def cmd_montecarlo(args) -> int:
    cfg, problem, vreport = _load(args)
    solution = _ensure_solution(args, cfg, problem, vreport)
    particles = int(cfg["montecarlo.particles"])
    substeps = int(cfg["montecarlo.substeps"])
    seed = int(cfg["seed"])
    errors = checkpoint_errors(solution, problem, particles, seed, substeps)
    negated = checkpoint_errors(solution, problem, particles, seed, substeps, control_scale=-1.0)
    lines = [f"particles={particles}", f"seed={seed}", f"substeps={substeps}"]
    lines += [f"l1_node_{k}={v!r}" for k, v in errors.items()]
    lines += [f"negated_l1_node_{k}={v!r}" for k, v in negated.items()]
    lines.append(f"max_l1={max(errors.values())!r}")
    _emit(lines, args.out / "montecarlo.txt")
    return EXIT_OK


def _oracle_applicable(problem, vreport) -> bool:
    q = problem.q
    return (problem.grid.dim == 1 and isinstance(problem.f, ZeroDrift) and isinstance(problem.sigma, ConstantMatrix)
            and isinstance(q, ConstantCost) and q.c == 0 and vreport.is_channel_coincident)


def cmd_oracle_compare(args) -> int:
    cfg, problem, vreport = _load(args)
    if not _oracle_applicable(problem, vreport):
        raise CommandError(EXIT_CONFIG, "the static oracle needs 1D, zero drift and cost, "
                                        "constant noise and coincident channels")
    solution = _ensure_solution(args, cfg, problem, vreport)
    grid = problem.grid
    variance = grid.horizon * float(np.asarray(problem.sigma.M)[0, 0] ** 2)
    rho0, rho1 = problem.rho0_field.values, problem.rho1_field.values
    phihat0, phi1, res = bridge_from_static(grid, rho0, rho1, variance)
    report = solution.report
    gap1 = projective_gap(report.phi.values[-1], phi1, essential_support(rho1))
    gap0 = projective_gap(report.phihat.values[0], phihat0, essential_support(rho0))
    lines = [f"static_iterations={res.iterations}",
             f"static_converged={'true' if res.converged else 'false'}",
             f"hilbert_phi1={gap1!r}", f"hilbert_phihat0={gap0!r}",
             f"agree={'true' if max(gap0, gap1) <= ORACLE_RTOL else 'false'}"]
    _emit(lines, args.out / "oracle.txt")
    return EXIT_OK


def cmd_identities(args) -> int:
    rows = run_battery()
    _emit(format_table(rows), args.out / "identities.txt" if args.out else None)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERICAL


HANDLERS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "recover": cmd_recover,
    "montecarlo": cmd_montecarlo,
    "oracle-compare": cmd_oracle_compare,
    "identities": cmd_identities,
}


def run(argv) -> int:
    try:
        args = _parser().parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
