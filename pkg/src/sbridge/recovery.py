"""Density, feedback and value function from converged factors, plus the
residuals of the primal/dual optimality system as a correctness check."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, ScalarField, VectorField
from .integrators import FactorTrajectory
from .io import coordinate_names, field_rows, write_csv
from .operators import _contract, floor_value, score_array

logger = logging.getLogger(__name__)

MASS_DEFECT_TOL = 1e-6
# log phi is only as accurate as the relative tail values; judge HJB where rho has real mass
SUPPORT_RTOL = 1e-3
RESIDUAL_MARGIN = 2


class NodeMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Field values at every time node: shape ``(K+1,) + grid.shape [+ (m,)]``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times()

    def __len__(self) -> int:
        return self.values.shape[0]

    def at(self, k: int):
        t = float(self.times[k])
        if self.values.ndim == self.grid.dim + 1:
            return ScalarField(self.grid, self.values[k], t)
        return VectorField(self.grid, self.values[k], t)


@dataclass(frozen=True, eq=False)
class DensityFlow(TimeSeries):
    @property
    def masses(self) -> np.ndarray:
        return self.values.reshape(len(self), -1).sum(axis=1) * self.grid.cell_volume

    @property
    def defect(self) -> float:
        """max_t |integrate(rho(t)) - 1|."""
        return float(np.max(np.abs(self.masses - 1.0)))

    def normalized(self) -> "DensityFlow":
        return DensityFlow(self.grid, self.values / self.masses.reshape((-1,) + (1,) * self.grid.dim))


@dataclass(eq=False)
class BridgeSolution:
    grid: Grid
    rho: DensityFlow
    u: TimeSeries
    S: TimeSeries
    floor_mask: np.ndarray
    lam: float
    report: object = None
    diagnostics: dict = field(default_factory=dict)


def _check_nodes(a: FactorTrajectory, b: FactorTrajectory) -> None:
    if a.values.shape != b.values.shape or a.grid != b.grid:
        raise NodeMismatchError("factor trajectories do not share time nodes and cells")


def recover_density(phi_traj: FactorTrajectory, phihat_traj: FactorTrajectory) -> DensityFlow:
    """Pointwise product per node. The mass defect is recorded, not removed."""
    _check_nodes(phi_traj, phihat_traj)
    flow = DensityFlow(phi_traj.grid, phi_traj.values * phihat_traj.values)
    if flow.defect > MASS_DEFECT_TOL:
        logger.warning("density mass defect %.3e exceeds %.1e", flow.defect, MASS_DEFECT_TOL)
    return flow


def _scores(phi_traj: FactorTrajectory, counters: Counter | None = None) -> np.ndarray:
    h = phi_traj.grid.h
    return np.array([score_array(v, h, counters) for v in phi_traj.values])


def recover_control(phi_traj: FactorTrajectory, problem, counters: Counter | None = None) -> TimeSeries:
    """u = lam g^T grad log phi at every node."""
    grid = problem.grid
    lam = problem.lam_value
    psi = _scores(phi_traj, counters)
    out = []
    for k, t in enumerate(grid.times()):
        g = problem.coefficients(float(t)).g
        out.append(lam * np.einsum("...ji,...j->...i", g, psi[k]))
    return TimeSeries(grid, np.array(out))


def recover_value(phi_traj: FactorTrajectory, lam: float) -> TimeSeries:
    """S = lam log phi (floored cells keep the log of their true value)."""
    return TimeSeries(phi_traj.grid, lam * np.log(phi_traj.values))


def floor_mask(phi_traj: FactorTrajectory) -> np.ndarray:
    """True where the relative score floor is active."""
    return np.array([v < floor_value(v) for v in phi_traj.values])


def build_solution(report, problem) -> BridgeSolution:
    """Assemble the solution from a solve report and fill its residual diagnostics."""
    if report.phi is None or report.phihat is None:
        raise ValueError("report carries no factor trajectories")
    counters: Counter = Counter()
    rho = recover_density(report.phi, report.phihat)
    u = recover_control(report.phi, problem, counters)
    S = recover_value(report.phi, problem.lam_value)
    sol = BridgeSolution(problem.grid, rho, u, S, floor_mask(report.phi), problem.lam_value, report)
    sol.diagnostics.update(
        mass_defect=rho.defect,
        primal_residual=primal_residual(sol, problem),
        dual_residual=dual_residual(sol, problem),
        objective=objective_value(sol, problem),
    )
    report.residuals.update(sol.diagnostics)
    report.counters.update(counters)
    return sol


# ---------------------------------------------------------------------------
# residuals


def _interior(grid: Grid, margin: int = RESIDUAL_MARGIN) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    mask[tuple(slice(margin, n - margin) for n in grid.cells)] = True
    return mask


def _d1(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order central first derivative; second order in the two edge cells."""
    out = np.gradient(a, h, axis=axis, edge_order=2)
    a = np.moveaxis(a, axis, 0)
    view = np.moveaxis(out, axis, 0)
    view[2:-2] = (-a[4:] + 8 * a[3:-1] - 8 * a[1:-3] + a[:-4]) / (12 * h)
    return out


def _d2(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order central second derivative, second order next to the walls."""
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[2:-2] = (-a[4:] + 16 * a[3:-1] - 30 * a[2:-2] + 16 * a[1:-3] - a[:-4]) / (12 * h * h)
    out[1] = (a[2] - 2 * a[1] + a[0]) / (h * h)
    out[-2] = (a[-1] - 2 * a[-2] + a[-3]) / (h * h)
    out[0], out[-1] = out[1], out[-2]
    return np.moveaxis(out, 0, axis)


def _second(a: np.ndarray, i: int, j: int, h) -> np.ndarray:
    return _d2(a, h[i], i) if i == j else _d1(_d1(a, h[j], j), h[i], i)


def _grad4(a: np.ndarray, h) -> np.ndarray:
    return np.stack([_d1(a, h[i], i) for i in range(len(h))], axis=-1)


def _hessian4(a: np.ndarray, h) -> np.ndarray:
    n = len(h)
    return np.stack([np.stack([_second(a, i, j, h) for j in range(n)], -1) for i in range(n)], -2)


def _divergence(vec: np.ndarray, h) -> np.ndarray:
    return sum(_d1(vec[..., a], h[a], a) for a in range(len(h)))


def _weighted_laplacian_array(rho: np.ndarray, Sigma: np.ndarray, h) -> np.ndarray:
    """sum_ij d_i d_j (Sigma_ij rho)."""
    n = len(h)
    out = np.zeros_like(rho)
    for i in range(n):
        for j in range(n):
            w = Sigma[..., i, j] * rho
            if np.any(w):
                out += _second(w, i, j, h)
    return out


def primal_residual(solution: BridgeSolution, problem) -> float:
    """max |rho_t + div(rho (f + g g^T grad S)) - 0.5 Delta_Sigma rho| over interior
    cells and nodes, divided by max|rho| / (t1 - t0)."""
    grid = solution.grid
    h, dt = grid.h, grid.dt
    rho = solution.rho.values
    K = grid.num_steps
    mask = _interior(grid)
    worst = 0.0
    times = grid.times()
    for k in range(1, K):
        co = problem.coefficients(float(times[k]))
        drift = co.f + np.einsum("...ij,...j->...i", co.g, solution.u.values[k])
        r = ((rho[k + 1] - rho[k - 1]) / (2 * dt)
             + _divergence(rho[k][..., None] * drift, h)
             - 0.5 * _weighted_laplacian_array(rho[k], co.Sigma, h))
        worst = max(worst, float(np.max(np.abs(r[mask]))))
    scale = float(np.max(np.abs(rho))) / grid.horizon
    return worst / scale if scale > 0 else worst


def dual_mask(solution: BridgeSolution, k: int) -> np.ndarray:
    """Interior, non-floored cells where rho(t_k) carries mass."""
    rho = solution.rho.values[k]
    return _interior(solution.grid) & ~solution.floor_mask[k] & (rho >= SUPPORT_RTOL * np.max(rho))


def dual_residual(solution: BridgeSolution, problem) -> float:
    """max |S_t + <grad S, f> + 0.5 <grad S, g g^T grad S> + 0.5 <Sigma, Hess S> - q|
    over :func:`dual_mask`, divided by the oscillation of S there per unit time."""
    grid = solution.grid
    h, dt = grid.h, grid.dt
    S = solution.S.values
    K = grid.num_steps
    worst = 0.0
    spread = 0.0
    times = grid.times()
    for k in range(1, K):
        co = problem.coefficients(float(times[k]))
        gS = _grad4(S[k], h)
        HS = _hessian4(S[k], h)
        r = ((S[k + 1] - S[k - 1]) / (2 * dt)
             + np.sum(gS * co.f, axis=-1)
             + 0.5 * np.einsum("...i,...ij,...j->...", gS, co.ggT, gS)
             + 0.5 * _contract(co.Sigma, HS) - co.q)
        mask = dual_mask(solution, k)
        if mask.any():
            worst = max(worst, float(np.max(np.abs(r[mask]))))
            spread = max(spread, float(np.ptp(S[k][mask])))
    scale = (spread if spread > 0 else solution.lam) / grid.horizon
    return worst / scale


def objective_value(solution: BridgeSolution, problem) -> float:
    """Trapezoid in time, midpoint in space, of (q + 0.5 |u|^2) rho."""
    grid = solution.grid
    times = grid.times()
    per_node = []
    for k, t in enumerate(times):
        q = problem.coefficients(float(t)).q
        effort = 0.5 * np.sum(solution.u.values[k] ** 2, axis=-1)
        per_node.append(float(np.sum((q + effort) * solution.rho.values[k])) * grid.cell_volume)
    return float(np.sum(0.5 * (np.array(per_node[1:]) + np.array(per_node[:-1])) * np.diff(times)))


# ---------------------------------------------------------------------------
# export


def summary_lines(solution: BridgeSolution) -> list[str]:
    lines = [f"time_nodes={solution.grid.num_steps + 1}", f"lambda={solution.lam!r}"]
    if solution.report is not None:
        return lines + solution.report.lines()
    return lines + [f"{k}={v!r}" for k, v in sorted(solution.diagnostics.items())]


def export_solution(solution: BridgeSolution, outdir, nodes=None, summary: bool = True) -> list[Path]:
    """Per-node CSV (coordinates, rho, u components, S) and ``summary.txt``.

    The exported rho is renormalized to unit mass; the defect is in the summary.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = solution.grid
    rho = solution.rho.normalized().values
    m = solution.u.values.shape[-1]
    header = coordinate_names(grid) + ["rho"] + [f"u{i + 1}" for i in range(m)] + ["S"]
    K = grid.num_steps
    nodes = range(K + 1) if nodes is None else nodes
    written = []
    for k in nodes:
        path = outdir / f"solution_{k:05d}.csv"
        write_csv(path, header, field_rows(grid, rho[k], solution.u.values[k], solution.S.values[k]))
        written.append(path)
    if summary:
        path = outdir / "summary.txt"
        path.write_text("\n".join(summary_lines(solution)) + "\n")
        written.append(path)
    return written
