import numpy as np
import pytest

from conftest import classical_grid
from sbridge.fixedpoint import SolveReport, sinkhorn_linear
from sbridge.grid import Grid
from sbridge.integrators import FactorTrajectory
from sbridge.io import read_csv
from sbridge.operators import score_array
from sbridge.problem import (BridgeProblem, ConstantCost, ConstantMatrix, TabulatedDensity, ZeroDrift,
                             classical_problem)
from sbridge.recovery import (BridgeSolution, DensityFlow, NodeMismatchError, TimeSeries, build_solution,
                              dual_residual, export_solution, objective_value, primal_residual,
                              recover_control, recover_density, recover_value)


def _unit_grid(cells=32, steps=10):
    return Grid((0.0,), (1.0,), (cells,), 0.0, 1.0, steps)


def _traj(grid, frame, direction="backward"):
    frames = np.broadcast_to(frame, (grid.num_steps + 1,) + grid.shape)
    return FactorTrajectory(grid, direction, np.array(frames))


def _problem(grid, g=1.0, sigma=1.0, q=0.0, lam=1.0, density=None):
    density = TabulatedDensity(grid, np.full(grid.shape, 1.0 / grid.cell_volume / grid.size)
                               if density is None else density)
    return BridgeProblem(grid, ZeroDrift(1), ConstantMatrix(np.array([[g]])),
                         ConstantMatrix(np.array([[sigma]])), ConstantCost(q), density, density, lam=lam)


def test_density_from_unit_factors():
    grid = _unit_grid()
    ones = np.ones(grid.shape)
    rho = recover_density(_traj(grid, ones), _traj(grid, ones, "forward"))
    assert np.array_equal(rho.values, np.ones((grid.num_steps + 1,) + grid.shape))
    assert rho.defect == pytest.approx(0.0, abs=1e-14)


def test_density_product_collapses():
    grid = _unit_grid()
    x = grid.axis_centers(0)
    rho = recover_density(_traj(grid, np.exp(x)), _traj(grid, 0.7 * np.exp(-x), "forward"))
    assert np.allclose(rho.values, 0.7, rtol=1e-14)


def test_density_node_mismatch():
    grid = _unit_grid()
    other = _unit_grid(steps=5)
    with pytest.raises(NodeMismatchError):
        recover_density(_traj(grid, np.ones(grid.shape)), _traj(other, np.ones(other.shape), "forward"))


def test_classical_endpoints_and_mass(classical):
    problem, report, sol = classical
    h = problem.grid.cell_volume
    assert np.sum(np.abs(sol.rho.values[0] - problem.rho0_field.values)) * h <= 1e-6
    assert np.sum(np.abs(sol.rho.values[-1] - problem.rho1_field.values)) * h <= 1e-6
    assert np.all(sol.rho.values >= 0)
    assert sol.rho.defect <= 1e-6


def test_control_examples():
    grid = _unit_grid()
    x = grid.axis_centers(0)
    zero = recover_control(_traj(grid, np.full(grid.shape, 3.0)), _problem(grid))
    assert np.array_equal(zero.values, np.zeros_like(zero.values))
    u = recover_control(_traj(grid, np.exp(x)), _problem(grid, g=3.0, lam=2.0))
    assert u.values.shape == (grid.num_steps + 1,) + grid.shape + (1,)
    assert np.allclose(u.values, 6.0, rtol=1e-10)


def test_control_matches_value_gradient(classical):
    problem, _, sol = classical
    grid = problem.grid
    for k in (0, grid.num_steps // 2, grid.num_steps):
        floored = sol.floor_mask[k]
        # cells whose whole central stencil is above the floor
        live = np.zeros_like(floored)
        live[1:-1] = ~(floored[:-2] | floored[1:-1] | floored[2:])
        grad_s = np.gradient(sol.S.values[k], grid.h[0], edge_order=2)
        assert np.allclose(sol.u.values[k][..., 0][live], grad_s[live], rtol=1e-9, atol=1e-9)


def test_value_examples():
    grid = _unit_grid()
    assert np.array_equal(recover_value(_traj(grid, np.ones(grid.shape)), 1.0).values,
                          np.zeros((grid.num_steps + 1,) + grid.shape))
    assert np.allclose(recover_value(_traj(grid, np.full(grid.shape, np.e)), 3.0).values, 3.0, rtol=1e-15)


def test_hopf_cole_round_trip(rng):
    grid = _unit_grid()
    lam = 1.7
    rho = rng.uniform(0.5, 2.0, (grid.num_steps + 1,) + grid.shape)
    S = rng.uniform(-3.0, 3.0, rho.shape)
    phi = FactorTrajectory(grid, "backward", np.exp(S / lam))
    phihat = FactorTrajectory(grid, "forward", rho * np.exp(-S / lam))
    assert np.allclose(recover_density(phi, phihat).values, rho, rtol=1e-14)
    assert np.allclose(recover_value(phi, lam).values, S, rtol=1e-14, atol=1e-14)


def _solution(problem, phi, phihat):
    report = SolveReport(True, 1, phi, phihat, [], "linear")
    return build_solution(report, problem)


def test_stationary_residuals_vanish():
    grid = _unit_grid()
    problem = _problem(grid)
    ones = np.ones(grid.shape)
    sol = _solution(problem, _traj(grid, ones), _traj(grid, ones, "forward"))
    assert primal_residual(sol, problem) <= 1e-8
    assert dual_residual(sol, problem) <= 1e-8
    assert objective_value(sol, problem) == 0.0


def test_dual_residual_hand_algebra():
    # S = x with no noise: 0.5 |grad S|^2 = 0.5 = q
    grid = _unit_grid()
    x = grid.axis_centers(0)
    problem = _problem(grid, sigma=0.0, q=0.5)
    sol = _solution(problem, _traj(grid, np.exp(x)), _traj(grid, np.exp(-x), "forward"))
    assert dual_residual(sol, problem) <= 1e-12


def test_residuals_flag_random_factors(rng):
    problem = classical_problem(classical_grid(128, 100))
    grid = problem.grid
    shape = (grid.num_steps + 1,) + grid.shape
    phi = FactorTrajectory(grid, "backward", rng.uniform(0.5, 1.5, shape))
    phihat = FactorTrajectory(grid, "forward", rng.uniform(0.5, 1.5, shape) * 0.0625)
    sol = _solution(problem, phi, phihat)
    assert primal_residual(sol, problem) > 0.1


def test_classical_residuals_at_128(classical_coarse):
    _, _, sol = classical_coarse
    assert sol.diagnostics["primal_residual"] <= 1e-2
    assert sol.diagnostics["dual_residual"] <= 1e-2


def test_objective_constant_control():
    grid = _unit_grid()
    K = grid.num_steps
    rho = DensityFlow(grid, np.ones((K + 1,) + grid.shape))
    u = TimeSeries(grid, np.full((K + 1,) + grid.shape + (1,), 2.0))
    S = TimeSeries(grid, np.zeros((K + 1,) + grid.shape))
    sol = BridgeSolution(grid, rho, u, S, np.zeros(rho.values.shape, bool), 1.0)
    assert objective_value(sol, _problem(grid)) == pytest.approx(2.0, rel=1e-12)


def test_objective_stable_across_last_iterations(classical_coarse):
    problem, report, sol = classical_coarse
    prev = sinkhorn_linear(problem, max_iter=report.iterations - 1)
    prev_obj = build_solution(prev, problem).diagnostics["objective"]
    assert abs(sol.diagnostics["objective"] - prev_obj) <= 1e-6


def test_gauge_leaves_recovery_unchanged(classical_coarse):
    problem, report, sol = classical_coarse
    phi = report.phi.scaled(7.0)
    phihat = report.phihat.scaled(1 / 7.0)
    rho = recover_density(phi, phihat)
    u = recover_control(phi, problem)
    assert np.allclose(rho.values, sol.rho.values, rtol=1e-12, atol=1e-300)
    assert np.allclose(u.values, sol.u.values, rtol=1e-12, atol=1e-12)


def test_export(tmp_path, classical_coarse):
    problem, _, sol = classical_coarse
    files = export_solution(sol, tmp_path, nodes=[0, 50])
    assert [p.name for p in files] == ["solution_00000.csv", "solution_00050.csv", "summary.txt"]
    header, data = read_csv(files[0])
    assert header == ["x1", "rho", "u1", "S"]
    data = data.reshape(-1, 4)
    assert data.shape[0] == problem.grid.size
    assert np.sum(data[:, 1]) * problem.grid.cell_volume == pytest.approx(1.0, abs=1e-12)
    summary = files[-1].read_text()
    assert "converged=true" in summary and "residual_primal_residual=" in summary


def test_score_constant_is_exact_zero():
    assert np.array_equal(score_array(np.full((9,), 2.5), (0.1,)), np.zeros((9, 1)))
