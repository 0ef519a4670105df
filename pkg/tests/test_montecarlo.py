import numpy as np
import pytest

from conftest import classical_grid
from sbridge.fixedpoint import sinkhorn_linear
from sbridge.grid import Grid
from sbridge.montecarlo import (SdeEnsemble, checkpoint_errors, crossvalidate, empirical_density,
                                export_ensemble_csv, interpolate, l1_distance, reflect, sample_density,
                                simulate)
from sbridge.io import read_csv
from sbridge.problem import (BridgeProblem, ConstantCost, ConstantMatrix, GaussianDensity, LinearDrift,
                             TabulatedDensity, ZeroDrift, classical_problem)
from sbridge.recovery import build_solution


def _problem(grid, drift=None, sigma=1.0, rho0=None):
    rho0 = rho0 if rho0 is not None else GaussianDensity((0.0,), ((0.25,),))
    return BridgeProblem(grid, drift or ZeroDrift(1), ConstantMatrix(np.eye(1)),
                         ConstantMatrix(np.array([[sigma]])), ConstantCost(0.0), rho0, rho0, lam=1.0)


def _zero_control(grid):
    return np.zeros((grid.num_steps + 1,) + grid.shape + (1,))


def test_frozen_without_noise():
    grid = Grid((-4.0,), (4.0,), (64,), 0.0, 1.0, 20)
    problem = _problem(grid, sigma=0.0)
    snaps = simulate(problem, _zero_control(grid), 1000, seed=3)
    assert np.array_equal(snaps[0].states, snaps[-1].states)
    assert snaps[-1].exits == 0


def test_one_step_variance_increment():
    grid = Grid((-8.0,), (8.0,), (64,), 0.0, 0.08, 2)
    problem = _problem(grid)
    N = 100_000
    snap = simulate(problem, _zero_control(grid), N, seed=11, record=[1], initial=np.zeros(N))[0]
    var = float(np.var(snap.states))
    assert abs(var / grid.dt - 1.0) <= 3 * np.sqrt(2 / N)


def test_ou_stationary_variance():
    grid = Grid((-6.0,), (6.0,), (64,), 0.0, 5.0, 250)
    problem = _problem(grid, drift=LinearDrift(-1.0), sigma=np.sqrt(2.0),
                       rho0=GaussianDensity((0.0,), ((0.1,),)))
    snaps = simulate(problem, _zero_control(grid), 100_000, seed=5, record=[grid.num_steps])
    assert float(np.var(snaps[-1].states)) == pytest.approx(1.0, rel=0.02)


def test_histogram_single_cell():
    grid = Grid((0.0,), (1.0,), (10,))
    ens = SdeEnsemble(50, 0, np.full(50, 0.33), 0)
    rho = empirical_density(ens, grid).values
    expected = np.zeros(10)
    expected[3] = 1 / grid.cell_volume
    assert np.allclose(rho, expected)


def test_histogram_uniform(rng):
    grid = Grid((0.0,), (1.0,), (50,))
    N = 200_000
    ens = SdeEnsemble(N, 0, rng.random(N), 0)
    assert l1_distance(empirical_density(ens, grid), np.ones(50)) <= 3 * np.sqrt(50 / N)


def test_histogram_gaussian(rng):
    grid = Grid((-8.0,), (8.0,), (128,))
    N = 100_000
    ens = SdeEnsemble(N, 0, rng.standard_normal(N), 0)
    x = grid.axis_centers(0)
    pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi)
    assert l1_distance(empirical_density(ens, grid), pdf) <= 0.02


def test_sampling_matches_density():
    grid = Grid((-8.0,), (8.0,), (128,))
    problem = _problem(grid)
    rng = np.random.Generator(np.random.Philox(0))
    x = sample_density(problem.rho0_field.values, grid, 100_000, rng)
    ens = SdeEnsemble(x.shape[0], 0, x, 0)
    assert l1_distance(empirical_density(ens, grid), problem.rho0_field.values) <= 0.03


def test_reflect():
    x = np.array([[-1.5], [0.5], [2.25], [5.5]])
    y, exits = reflect(x, (0.0,), (2.0,))
    assert exits == 3
    assert np.allclose(y[:, 0], [1.5, 0.5, 1.75, 1.5])


def test_reflection_keeps_particles():
    grid = Grid((-1.0,), (1.0,), (16,), 0.0, 1.0, 50)
    flat = TabulatedDensity(grid, np.full(grid.shape, 0.5))
    problem = _problem(grid, sigma=2.0, rho0=flat)
    snap = simulate(problem, _zero_control(grid), 5000, seed=1, record=[grid.num_steps])[-1]
    assert snap.states.shape == (5000, 1)
    assert snap.exits > 0
    assert np.all((snap.states >= -1.0) & (snap.states <= 1.0))


def test_zero_control_invariant_density():
    grid = Grid((-1.0,), (1.0,), (16,), 0.0, 1.0, 20)
    flat = TabulatedDensity(grid, np.full(grid.shape, 0.5))
    problem = _problem(grid, rho0=flat)
    N = 50_000
    snap = simulate(problem, _zero_control(grid), N, seed=2, record=[grid.num_steps])[-1]
    assert l1_distance(empirical_density(snap, grid), flat.values) <= 3 * np.sqrt(16 / N)


def test_interpolate_linear_profile():
    grid = Grid((0.0,), (1.0,), (8,))
    x = grid.axis_centers(0)
    pts = np.array([[0.2], [0.5], [0.77]])
    assert np.allclose(interpolate(grid, 3 * x - 1, pts), 3 * pts[:, 0] - 1)


@pytest.fixture(scope="module")
def coarse_solution():
    problem = classical_problem(classical_grid(128, 100))
    return problem, build_solution(sinkhorn_linear(problem), problem)


def test_determinism(coarse_solution):
    problem, sol = coarse_solution
    a = checkpoint_errors(sol, problem, 2000, seed=9)
    b = checkpoint_errors(sol, problem, 2000, seed=9)
    assert a == b
    assert checkpoint_errors(sol, problem, 2000, seed=10) != a


def test_convergence_in_particles(coarse_solution):
    problem, sol = coarse_solution
    ratios = [crossvalidate(sol, problem, 16_000, seed=s) / crossvalidate(sol, problem, 4_000, seed=s)
              for s in range(5)]
    assert np.mean(ratios) <= 0.75


def test_ensemble_validation():
    with pytest.raises(ValueError):
        SdeEnsemble(0, 0, np.zeros((0, 1)), 0)
    with pytest.raises(ValueError):
        SdeEnsemble(2, 0, np.array([0.0, np.nan]), 0)


def test_export_csv(tmp_path):
    grid = Grid((0.0,), (1.0,), (8,))
    ens = SdeEnsemble(3, 0, np.array([0.1, 0.2, 0.3]), 0)
    export_ensemble_csv(tmp_path / "e.csv", ens, grid)
    header, data = read_csv(tmp_path / "e.csv")
    assert header == ["particle", "x1"]
    assert np.allclose(data.reshape(-1, 2)[:, 1], [0.1, 0.2, 0.3])
