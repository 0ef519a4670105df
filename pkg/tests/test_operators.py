from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbridge.grid import Grid, MatrixField, ScalarField, VectorField, field_from_function, integrate
from sbridge.operators import (OperatorWorkspace, PositivityError, advection_divergence, excess_drift,
                               excess_reaction, gradient, hessian_contraction, hessian_log_residual,
                               lemma1_residual, lemma1_special_residuals, matrix_divergence, score,
                               weighted_laplacian)
from sbridge.problem import classical_problem

G1 = Grid((0.0,), (1.0,), (64,))
G2 = Grid((-1.0, -1.0), (1.0, 1.0), (16, 20))


def interior(ws):
    return ws.interior_mask(2)


def field(grid, fn):
    return field_from_function(grid, fn)


def const_sigma(grid, S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return MatrixField(grid, np.broadcast_to(S, grid.shape + S.shape))


def sigma_from(grid, fn):
    return MatrixField(grid, fn(grid.points()))


def test_gradient_examples():
    ws = OperatorWorkspace(G1)
    assert not np.any(gradient(ScalarField(G1, np.full(64, 2.5)), ws).values)
    g = gradient(field(G1, lambda p: 3 * p[..., 0]), ws).values[..., 0]
    np.testing.assert_allclose(g, 3.0, rtol=1e-12)
    x = G1.axis_centers(0)
    g = gradient(field(G1, lambda p: p[..., 0] ** 2), ws).values[..., 0]
    np.testing.assert_allclose(g[1:-1], 2 * x[1:-1], rtol=1e-12)


def test_gradient_is_affine_exact_in_2d():
    ws = OperatorWorkspace(G2)
    g = gradient(field(G2, lambda p: 2 * p[..., 0] - 0.5 * p[..., 1] + 1), ws).values
    np.testing.assert_allclose(g[..., 0], 2.0, rtol=1e-12)
    np.testing.assert_allclose(g[..., 1], -0.5, rtol=1e-12)


def test_matrix_divergence_examples():
    ws = OperatorWorkspace(G1)
    assert not np.any(matrix_divergence(const_sigma(G1, 3.0), ws).values)
    d = matrix_divergence(sigma_from(G1, lambda p: p[..., None]), ws).values
    np.testing.assert_allclose(d, 1.0, rtol=1e-12)
    ws2 = OperatorWorkspace(G2)
    diag = sigma_from(G2, lambda p: np.einsum("...i,ij->...ij", p, np.eye(2)))
    np.testing.assert_allclose(matrix_divergence(diag, ws2).values, 1.0, rtol=1e-12)


def test_matrix_divergence_rejects_non_square():
    ws = OperatorWorkspace(G2)
    with pytest.raises(ValueError):
        matrix_divergence(MatrixField(G2, np.ones(G2.shape + (2, 3))), ws)


def test_weighted_laplacian_examples():
    ws = OperatorWorkspace(G1)
    m = interior(ws)
    lap = weighted_laplacian(field(G1, lambda p: p[..., 0] ** 2), const_sigma(G1, 1.0), ws).values
    np.testing.assert_allclose(lap[m], 2.0, rtol=1e-10)
    assert np.max(np.abs(weighted_laplacian(ScalarField(G1, np.full(64, 4.0)), const_sigma(G1, 1.0), ws).values)) \
        < 1e-9
    lap = weighted_laplacian(ScalarField(G1, np.ones(64)), sigma_from(G1, lambda p: p[..., None] ** 2), ws).values
    np.testing.assert_allclose(lap[m], 2.0, rtol=1e-10)


def test_weighted_laplacian_dimension_mismatch():
    ws = OperatorWorkspace(G1)
    with pytest.raises(ValueError):
        weighted_laplacian(ScalarField(G1, np.ones(64)), const_sigma(G1, np.eye(2)), ws)


def test_hessian_contraction_examples():
    ws = OperatorWorkspace(G1)
    sq = field(G1, lambda p: p[..., 0] ** 2)
    m = interior(ws)
    np.testing.assert_allclose(hessian_contraction(sq, const_sigma(G1, 1.0), ws).values[m], 2.0, rtol=1e-10)
    np.testing.assert_allclose(hessian_contraction(sq, const_sigma(G1, 2.0), ws).values[m], 4.0, rtol=1e-10)
    ws2 = OperatorWorkspace(G2)
    xy = field(G2, lambda p: p[..., 0] * p[..., 1])
    h = hessian_contraction(xy, const_sigma(G2, [[0.0, 1.0], [1.0, 0.0]]), ws2).values
    np.testing.assert_allclose(h[interior(ws2)], 2.0, rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_weighted_laplacian_conserves_mass(seed):
    r = np.random.default_rng(seed)
    ws = OperatorWorkspace(G2)
    rho = ScalarField(G2, r.random(G2.shape))
    A = r.normal(size=G2.shape + (2, 2))
    Sigma = MatrixField(G2, A @ np.swapaxes(A, -1, -2))
    total = integrate(weighted_laplacian(rho, Sigma, ws))
    scale = float(np.max(np.abs(rho.values))) * float(np.max(np.abs(Sigma.values))) / min(G2.h) ** 2
    assert abs(total) <= 1e-12 * scale


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(-2, 2))
def test_operators_are_linear(seed, a, b):
    r = np.random.default_rng(seed)
    ws = OperatorWorkspace(G2)
    u, v = ScalarField(G2, r.normal(size=G2.shape)), ScalarField(G2, r.normal(size=G2.shape))
    A = r.normal(size=G2.shape + (2, 2))
    Sigma = MatrixField(G2, A @ np.swapaxes(A, -1, -2))
    drift = VectorField(G2, r.normal(size=G2.shape + (2,)))
    w = a * u + b * v
    for op in (lambda f: gradient(f, ws), lambda f: weighted_laplacian(f, Sigma, ws),
               lambda f: hessian_contraction(f, Sigma, ws), lambda f: advection_divergence(f, drift, ws)):
        lhs = op(w).values
        rhs = a * op(u).values + b * op(v).values
        scale = 1.0 + np.max(np.abs(op(u).values)) + np.max(np.abs(op(v).values))
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale * (1 + abs(a) + abs(b))


def test_advection_divergence_is_conservative():
    ws = OperatorWorkspace(G2)
    r = np.random.default_rng(3)
    rho = ScalarField(G2, r.random(G2.shape))
    drift = VectorField(G2, r.normal(size=G2.shape + (2,)))
    assert abs(integrate(advection_divergence(rho, drift, ws))) < 1e-12


def test_product_rule_trivial_cases():
    ws = OperatorWorkspace(G1)
    c = ScalarField(G1, np.full(64, 1.7))
    assert lemma1_residual(c, c * 0.5, sigma_from(G1, lambda p: (1 + p[..., 0] ** 2)[..., None, None]), ws) < 1e-9
    x = field(G1, lambda p: p[..., 0])
    assert lemma1_residual(x, x, const_sigma(G1, 1.0), ws) < 1e-10


def test_product_rule_sin_cos_refinement():
    res = []
    for n in (64, 128):
        g = Grid((-2.0,), (2.0,), (n,))
        ws = OperatorWorkspace(g)
        a = field(g, lambda p: np.sin(p[..., 0]))
        b = field(g, lambda p: np.cos(p[..., 0]))
        S = sigma_from(g, lambda p: (1 + p[..., 0] ** 2 / 4)[..., None, None])
        res.append((lemma1_residual(a, b, S, ws),) + lemma1_special_residuals(a, b, S, ws))
    ratios = np.array(res[0]) / np.array(res[1])
    assert np.all((3.5 <= ratios) & (ratios <= 4.5)), ratios


def test_hessian_log_identity_refines():
    res = []
    for n in (32, 64, 128):
        g = Grid((-1.0, -1.0), (1.0, 1.0), (n, n))
        phi = field(g, lambda p: np.exp(-p[..., 0] ** 2 - 0.5 * p[..., 0] * p[..., 1]) + 0.5)
        res.append(hessian_log_residual(phi, 2.0, OperatorWorkspace(g)))
    ratios = np.array(res[:-1]) / np.array(res[1:])
    assert np.all((3.5 <= ratios) & (ratios <= 4.5)), ratios


def test_score_examples():
    g = Grid((-2.0,), (2.0,), (64,))
    ws = OperatorWorkspace(g)
    x = g.axis_centers(0)
    assert not np.any(score(ScalarField(g, np.full(64, 3.0)), ws).values)
    np.testing.assert_allclose(score(ScalarField(g, np.exp(x)), ws).values[..., 0], 1.0, rtol=1e-12)
    s = score(ScalarField(g, np.exp(-x**2 / 2)), ws).values[..., 0]
    np.testing.assert_allclose(s[1:-1], -x[1:-1], rtol=1e-10, atol=1e-12)


def test_score_floor_and_positivity():
    g = Grid((-1.0,), (1.0,), (16,))
    ws = OperatorWorkspace(g)
    v = np.ones(16)
    v[:3] = 1e-20
    counters = Counter()
    s = score(ScalarField(g, v), ws, counters)
    assert counters["score_floor"] == 3
    assert np.all(np.isfinite(s.values))
    v[5] = 0.0
    with pytest.raises(PositivityError):
        score(ScalarField(g, v), ws)


def excess_problem(g=1.0, sigma=0.0, lam=1.0):
    return classical_problem(Grid((-2.0,), (2.0,), (32,)), g=g, sigma=sigma, lam=lam)


def test_excess_terms_examples():
    p = excess_problem()
    ws = OperatorWorkspace(p.grid)
    x = p.grid.axis_centers(0)
    e = ScalarField(p.grid, np.exp(x))
    np.testing.assert_allclose(excess_drift(e, p, 0.0, ws).values[..., 0], 1.0, rtol=1e-12)
    np.testing.assert_allclose(excess_reaction(e, p, 0.0, ws).values, 0.5, rtol=1e-12)
    p = excess_problem(g=0.0, sigma=1.0)
    np.testing.assert_allclose(excess_drift(e, p, 0.0, ws).values[..., 0], -1.0, rtol=1e-12)
    e2 = ScalarField(p.grid, np.exp(2 * x))
    np.testing.assert_allclose(excess_reaction(e2, p, 0.0, ws).values, -2.0, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 3.0))
def test_excess_terms_vanish_bitwise_under_coincidence(seed, s):
    p = excess_problem(g=1.0, sigma=s, lam=s * s)
    ws = OperatorWorkspace(p.grid)
    phi = ScalarField(p.grid, np.exp(np.random.default_rng(seed).normal(size=32)))
    assert not np.any(excess_drift(phi, p, 0.0, ws).values)
    assert not np.any(excess_reaction(phi, p, 0.0, ws).values)
