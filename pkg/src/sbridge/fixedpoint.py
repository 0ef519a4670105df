"""Endpoint fixed-point recursions for the factor pair.

Both solvers alternate a backward pass for ``phi`` and a forward pass for
``phihat`` and update the endpoint data ``phihat(t0) = rho0 / phi(t0)`` and
``phi(t1) = rho1 / phihat(t1)``. Progress is measured in the Hilbert
projective metric, which ignores the free multiplicative gauge of the pair.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import ScalarField
from .integrators import (FactorTrajectory, Propagator, StepScheme, backward_phi_linear,
                          backward_phi_nonlinear, forward_phihat_linear, forward_phihat_nonlinear)
from .io import write_csv
from .operators import FLOOR_RTOL, PositivityError
from .problem import BridgeProblem, validate

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
MARGINAL_TOL = 1e-6
MAX_ITER_LINEAR = 500
MAX_ITER_NONLINEAR = 200
HISTORY_HEADER = ["iteration", "hilbert_phi1", "hilbert_phihat0", "marginal_l1", "wall_time"]


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, ScalarField) else x, dtype=float)


def hilbert_distance(u, v) -> float:
    """log max(u/v) - log min(u/v) for strictly positive ``u``, ``v``."""
    a, b = _values(u), _values(v)
    if a.shape != b.shape:
        raise ValueError("hilbert_distance needs arrays on the same grid")
    if np.any(a <= 0) or np.any(b <= 0):
        raise PositivityError("hilbert_distance needs strictly positive arguments")
    r = np.log(a) - np.log(b)
    return float(np.max(r) - np.min(r))


def safe_divide(num: np.ndarray, den: np.ndarray, counters: Counter | None = None) -> np.ndarray:
    """``num / den`` with the relative floor on ``den`` and zero numerators
    lifted to the smallest positive double, so the result stays positive."""
    eps = FLOOR_RTOL * float(np.max(den))
    low = den < eps
    zero = num <= 0
    if counters is not None:
        counters["division_floor"] += int(np.sum(low))
        counters["zero_numerator"] += int(np.sum(zero))
    out = np.where(zero, np.finfo(float).tiny, num) / np.where(low, eps, den)
    return np.maximum(out, np.finfo(float).tiny)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    hilbert_phi1: float
    hilbert_phihat0: float
    marginal_l1: float
    wall_time: float

    def as_tuple(self) -> tuple:
        return (self.iteration, self.hilbert_phi1, self.hilbert_phihat0, self.marginal_l1, self.wall_time)


@dataclass
class SinkhornState:
    phi1: np.ndarray
    phihat0: np.ndarray
    iteration: int = 0
    history: list[HistoryRow] = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.phi1 <= 0) or np.any(self.phihat0 <= 0):
            raise PositivityError("endpoint factors must be strictly positive")


@dataclass
class RecursionResult:
    converged: bool
    state: SinkhornState
    backward: object
    forward: object
    counters: Counter
    message: str = ""


def endpoint_recursion(backward: Callable, forward: Callable, rho0: np.ndarray, rho1: np.ndarray,
                       phi1: np.ndarray, *, weight: float = 1.0, tol: float = DEFAULT_TOL,
                       marginal_tol: float = MARGINAL_TOL, max_iter: int = MAX_ITER_LINEAR,
                       damping: float = 1.0, on_iterate: Callable | None = None,
                       history: list | None = None) -> RecursionResult:
    """Generic endpoint recursion.

    ``backward(phi1) -> (phi0, bwd)`` and ``forward(phihat0, bwd) -> (phihat1,
    fwd)`` are the two propagators on flat arrays; ``weight`` is the
    quadrature weight of one cell for the L1 marginal check. The returned
    ``backward``/``forward`` objects belong to the same (last) iteration.
    Rows are appended to ``history`` when given, so callers keep them even
    if a propagator raises.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    counters: Counter = Counter()
    rho0 = np.asarray(rho0, dtype=float)
    rho1 = np.asarray(rho1, dtype=float)
    phi1 = np.asarray(phi1, dtype=float)
    state = SinkhornState(phi1.copy(), np.ones_like(rho0), history=[] if history is None else history)
    prev_phihat0 = None
    start = time.perf_counter()
    bwd = fwd = None
    for it in range(1, max_iter + 1):
        phi0, bwd = backward(state.phi1)
        phihat0 = safe_divide(rho0, phi0, counters)
        phihat1, fwd = forward(phihat0, bwd)
        marginal = max(float(np.sum(np.abs(phihat0 * phi0 - rho0))) * weight,
                       float(np.sum(np.abs(phihat1 * state.phi1 - rho1))) * weight)
        target = safe_divide(rho1, phihat1, counters)
        if damping < 1:
            target = state.phi1 ** (1 - damping) * target ** damping
        d1 = hilbert_distance(target, state.phi1)
        d0 = hilbert_distance(phihat0, prev_phihat0) if prev_phihat0 is not None else float("nan")
        row = HistoryRow(it, d1, d0, marginal, time.perf_counter() - start)
        state.history.append(row)
        state.iteration = it
        state.phihat0 = phihat0
        if on_iterate is not None:
            on_iterate(row, phi0, phihat1)
        if d1 <= tol and marginal <= marginal_tol:
            # the pair from this pass is consistent; keep phi1 that produced it
            return RecursionResult(True, state, bwd, fwd, counters, f"converged after {it} iterations")
        state.phi1 = target
        prev_phihat0 = phihat0
    return RecursionResult(False, state, bwd, fwd, counters, f"no convergence within {max_iter} iterations")


# ---------------------------------------------------------------------------
# PDE solvers


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    phi: FactorTrajectory | None
    phihat: FactorTrajectory | None
    history: list[HistoryRow]
    regime: str
    counters: Counter = field(default_factory=Counter)
    message: str = ""
    residuals: dict = field(default_factory=dict)
    phi1_iterates: list = field(default_factory=list, repr=False)

    @property
    def final_marginal_l1(self) -> float:
        return self.history[-1].marginal_l1 if self.history else float("nan")

    def lines(self) -> list[str]:
        out = [f"converged={'true' if self.converged else 'false'}",
               f"iterations={self.iterations}",
               f"regime={self.regime}",
               f"final_marginal_l1={self.final_marginal_l1!r}"]
        if self.history:
            out.append(f"final_hilbert_phi1={self.history[-1].hilbert_phi1!r}")
        out += [f"residual_{k}={v!r}" for k, v in sorted(self.residuals.items())]
        out += [f"counter_{k}={v}" for k, v in sorted(self.counters.items())]
        if self.message:
            out.append(f"message={self.message}")
        return out


def initial_guess(problem: BridgeProblem, mode: str = "ones") -> ScalarField:
    """Terminal guess for ``phi``: all ones, or ``sqrt(rho1)``."""
    grid = problem.grid
    if mode == "ones":
        return ScalarField(grid, np.ones(grid.shape), grid.t1)
    if mode == "sqrt":
        return ScalarField(grid, np.maximum(np.sqrt(problem.rho1_field.values), np.finfo(float).tiny), grid.t1)
    raise ValueError(f"unknown initial guess mode {mode!r}")


def _guess_array(problem, guess) -> np.ndarray:
    if guess is None:
        guess = initial_guess(problem)
    elif isinstance(guess, str):
        guess = initial_guess(problem, guess)
    return _values(guess).reshape(-1)


def _run(problem: BridgeProblem, backward_pass, forward_pass, regime: str, tol, max_iter,
         guess, damping, history: list) -> RecursionResult:
    grid = problem.grid
    shape = grid.shape

    def backward(phi1):
        traj = backward_pass(ScalarField(grid, phi1.reshape(shape), grid.t1))
        return traj.values[0].reshape(-1), traj

    def forward(phihat0, bwd):
        traj = forward_pass(ScalarField(grid, phihat0.reshape(shape), grid.t0), bwd)
        return traj.values[-1].reshape(-1), traj

    def record(row, phi0, phihat1):
        logger.debug("%s iteration %d: d_H=%.3e marginal=%.3e", regime, row.iteration,
                     row.hilbert_phi1, row.marginal_l1)

    res = endpoint_recursion(backward, forward, problem.rho0_field.flat, problem.rho1_field.flat,
                             _guess_array(problem, guess), weight=grid.cell_volume, tol=tol,
                             max_iter=max_iter, damping=damping, on_iterate=record, history=history)
    return res


def _report(res: RecursionResult, regime: str) -> SolveReport:
    counters = Counter(res.counters)
    for traj in (res.backward, res.forward):
        if traj is not None:
            counters.update(traj.counters)
    return SolveReport(res.converged, res.state.iteration, res.backward, res.forward,
                       res.state.history, regime, counters, res.message)


def sinkhorn_linear(problem: BridgeProblem, scheme: StepScheme | None = None, tol: float = DEFAULT_TOL,
                    max_iter: int = MAX_ITER_LINEAR, guess=None, check: bool = True,
                    keep_iterates: bool = False) -> SolveReport:
    """Dynamic Sinkhorn for channel-coincident problems.

    Positivity loss propagates as :class:`PositivityError`; running out of
    iterations returns a report with ``converged=False``. With
    ``keep_iterates`` every terminal iterate ``phi(t1)`` is kept on the report.
    """
    if check and not validate(problem).is_channel_coincident:
        raise ValueError("sinkhorn_linear needs lam g g^T = Sigma; use sinkhorn_generalized")
    prop = Propagator(problem, scheme)
    phi1_iterates: list = []

    def bwd(terminal):
        if keep_iterates:
            phi1_iterates.append(terminal.flat.copy())
        return backward_phi_linear(terminal, problem, propagator=prop)

    res = _run(problem, bwd, lambda init, _: forward_phihat_linear(init, problem, propagator=prop),
               "linear", tol, max_iter, guess, 1.0, [])
    report = _report(res, "linear")
    report.phi1_iterates = phi1_iterates
    return report


def sinkhorn_generalized(problem: BridgeProblem, scheme: StepScheme | None = None, tol: float = DEFAULT_TOL,
                         max_iter: int = MAX_ITER_NONLINEAR, guess=None, damping: float = 1.0,
                         keep_iterates: bool = False) -> SolveReport:
    """Backward/forward recursion with the excess drift and reaction.

    The forward pass reuses the per-step scores saved by the backward pass.
    No contraction is assumed: numerical failures (positivity loss,
    divergence) end the run with ``converged=False`` and the history so far.
    """
    prop = Propagator(problem, scheme)
    phi1_iterates: list = []
    history: list = []

    def bwd(terminal):
        if keep_iterates:
            phi1_iterates.append(terminal.flat.copy())
        return backward_phi_nonlinear(terminal, problem, propagator=prop)

    def fwd(init, phi_traj):
        return forward_phihat_nonlinear(init, phi_traj, problem, propagator=prop)

    try:
        res = _run(problem, bwd, fwd, "nonlinear", tol, max_iter, guess, damping, history)
    except ArithmeticError as exc:
        logger.warning("generalized recursion stopped: %s", exc)
        return SolveReport(False, len(history), None, None, history, "nonlinear",
                           message=f"{type(exc).__name__}: {exc}", phi1_iterates=phi1_iterates)
    report = _report(res, "nonlinear")
    report.phi1_iterates = phi1_iterates
    return report


def write_history_csv(path, history: list[HistoryRow]) -> None:
    write_csv(path, HISTORY_HEADER, [r.as_tuple() for r in history])
