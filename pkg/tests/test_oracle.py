import numpy as np
import pytest
from scipy.integrate import trapezoid

from conftest import classical_grid
from sbridge.grid import Grid
from sbridge.oracle import (bridge_from_static, essential_support, gaussian_heat_flow, heat_kernel_matrix,
                            projective_gap, static_sinkhorn, two_point_scaling)


def _gauss(x, m, v):
    return np.exp(-(x - m) ** 2 / (2 * v)) / np.sqrt(2 * np.pi * v)


def test_heat_kernel_symmetric_and_normalized():
    grid = classical_grid()
    for T in (0.1, 1.0):
        K = heat_kernel_matrix(grid, T)
        assert np.array_equal(K, K.T)
        assert np.all(K > 0)
        x = grid.axis_centers(0)
        inner = np.abs(x) <= 8 - 6 * np.sqrt(T)
        assert np.all(K.sum(axis=1)[inner] >= 1 - 1e-6)


def test_heat_kernel_flat_limit():
    grid = Grid((-1.0,), (1.0,), (16,))
    K = heat_kernel_matrix(grid, 1e8)
    assert np.ptp(K) / np.max(K) <= 1e-6


def test_heat_kernel_rejects_nonpositive_time():
    grid = classical_grid(64)
    with pytest.raises(ValueError):
        heat_kernel_matrix(grid, 0.0)
    with pytest.raises(ValueError):
        heat_kernel_matrix(grid, -1.0)


def test_static_rejects_nonpositive_kernel():
    with pytest.raises(ValueError):
        static_sinkhorn(np.array([[1.0, 0.0], [0.5, 1.0]]), np.ones(2) / 2, np.ones(2) / 2)


def test_all_ones_kernel():
    n = 6
    a = np.full(n, 1 / n)
    res = static_sinkhorn(np.ones((n, n)), a, a)
    assert res.converged
    assert np.ptp(res.u) <= 1e-15 * res.u.max() and np.ptp(res.v) <= 1e-15 * res.v.max()


def test_diagonal_dominant_two_cell():
    K = np.array([[0.9, 0.1], [0.1, 0.9]])
    a = np.array([0.4, 0.6])
    res = static_sinkhorn(K, a, a, tol=1e-15)
    P = res.u[:, None] * K * res.v[None, :]
    assert np.allclose(P.sum(1), a, atol=1e-12) and np.allclose(P.sum(0), a, atol=1e-12)
    # symmetric K with equal marginals gives u proportional to v
    assert np.ptp(res.u / res.v) <= 1e-12 * np.max(res.u / res.v)
    u_ref, v_ref = two_point_scaling(K, a, a)
    assert np.allclose(res.v / res.v[0], v_ref, rtol=1e-12)


def test_two_point_scaling_marginals():
    K = np.array([[2.0, 0.5], [0.3, 1.1]])
    mu, nu = np.array([0.25, 0.75]), np.array([0.5, 0.5])
    u, v = two_point_scaling(K, mu, nu)
    P = u[:, None] * K * v[None, :]
    assert np.allclose(P.sum(1), mu, atol=1e-14) and np.allclose(P.sum(0), nu, atol=1e-14)


def test_heat_kernel_scaling_converges():
    grid = classical_grid()
    x = grid.axis_centers(0)
    h = grid.cell_volume
    a, b = _gauss(x, -1, 0.25) * h, _gauss(x, 1, 0.25) * h
    a, b = a / a.sum(), b / b.sum()
    res = static_sinkhorn(heat_kernel_matrix(grid, 1.0), a, b, tol=1e-14, max_iter=200)
    K = heat_kernel_matrix(grid, 1.0)
    P = res.u[:, None] * K * res.v[None, :]
    assert res.iterations <= 200
    assert np.max(np.abs(P.sum(1) - a)) <= 1e-10 and np.max(np.abs(P.sum(0) - b)) <= 1e-10
    d = np.array(res.history)
    live = d[d > 1e-13]
    assert np.all(np.diff(live) < 0)


def test_symmetric_bridge_factors():
    grid = classical_grid(128)
    x = grid.axis_centers(0)
    rho = _gauss(x, 0.0, 0.5)
    phihat0, phi1, res = bridge_from_static(grid, rho, rho, 1.0)
    assert res.converged
    mask = essential_support(rho)
    assert projective_gap(phihat0, phi1, mask) <= 1e-9


def test_essential_support():
    w = np.array([1e-9, 0.5, 1e-8, 0.5, 1e-3])
    assert np.array_equal(essential_support(w, 1e-6), [False, True, False, True, True])
    assert essential_support(w, 0.0).all()


def test_projective_gap_is_gauge_free():
    a = np.array([1.0, 2.0, 3.0])
    mask = np.array([True, True, False])
    assert projective_gap(a, 5 * a, mask) == pytest.approx(0.0, abs=1e-15)


def test_gaussian_heat_flow_mass():
    x = np.linspace(-20, 20, 40001)
    rho = gaussian_heat_flow(x, 0.3, 0.25, 2.0, diffusivity=0.5)
    assert trapezoid(rho, x) == pytest.approx(1.0, abs=1e-10)
    assert trapezoid(rho * (x - 0.3) ** 2, x) == pytest.approx(1.25, rel=1e-8)
