"""Finite-difference operators on cell-centered grids.

Two families live here. Field-level functions (``gradient``,
``weighted_laplacian``, ``score``, ...) act on the containers from
:mod:`sbridge.grid`. :class:`OperatorWorkspace` also assembles the sparse
face-flux matrices that the time steppers use, so the conservative weighted
Laplacian seen by a caller shares its stencils with the solver.

Face-flux construction along one axis with ``N`` cells: ``face_grad`` maps
cell values to the ``N + 1`` face derivatives, ``face_avg`` to face averages,
``face_div`` maps face fluxes back to cells. In zero-flux mode the boundary
faces carry no flux, so ``sum(face_div @ F) == 0`` exactly.
"""

from __future__ import annotations

from collections import Counter
from functools import reduce

import numpy as np
import scipy.sparse as sp

from .grid import Grid, MatrixField, ScalarField, VectorField, same_grid

FLOOR_RTOL = 1e-12
BOUNDARY_MODES = ("zero-flux", "zero-dirichlet")


class PositivityError(ArithmeticError):
    """A factor that must stay strictly positive did not."""


def _face_grad(n: int, h: float, mode: str) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k in range(1, n):
        rows += [k, k]
        cols += [k - 1, k]
        vals += [-1.0 / h, 1.0 / h]
    if mode == "zero-dirichlet":
        rows += [0, n]
        cols += [0, n - 1]
        vals += [1.0 / h, -1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))


def _face_avg(n: int, mode: str) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k in range(1, n):
        rows += [k, k]
        cols += [k - 1, k]
        vals += [0.5, 0.5]
    if mode == "zero-dirichlet":
        rows += [0, n]
        cols += [0, n - 1]
        vals += [0.5, 0.5]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))


def _face_div(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -1.0 / h)
    upper = np.full(n, 1.0 / h)
    return sp.diags([main, upper], [0, 1], shape=(n, n + 1), format="csr")


def _cell_grad(n: int, h: float) -> sp.csr_matrix:
    """Central differences inside, second-order one-sided at the two ends."""
    m = sp.lil_matrix((n, n))
    for k in range(1, n - 1):
        m[k, k - 1] = -0.5 / h
        m[k, k + 1] = 0.5 / h
    m[0, 0:3] = np.array([-1.5, 2.0, -0.5]) / h
    m[n - 1, n - 3:n] = np.array([0.5, -2.0, 1.5]) / h
    return m.tocsr()


def _compact_weights(n: int, theta: float = 1.0) -> sp.csr_matrix:
    """Tridiagonal ``I + theta/12 (1, -2, 1)``; the end rows drop the missing
    neighbour so every column sums to one."""
    main = np.full(n, 1.0 - theta / 6.0)
    main[[0, -1]] = 1.0 - theta / 12.0
    off = np.full(n - 1, theta / 12.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _lift(op: sp.spmatrix, axis: int, cells: tuple[int, ...]) -> sp.csr_matrix:
    """Apply a 1D operator along ``axis`` of a row-major n-D array."""
    factors = [sp.identity(c, format="csr") for c in cells]
    factors[axis] = op
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), factors).tocsr()


def _face_cells(cells: tuple[int, ...], axis: int) -> tuple[int, ...]:
    return tuple(c + 1 if a == axis else c for a, c in enumerate(cells))


class OperatorWorkspace:
    """Precomputed stencils for one grid and boundary mode; read-only."""

    def __init__(self, grid: Grid, boundary: str = "zero-flux"):
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {boundary!r}")
        self.grid = grid
        self.boundary = boundary
        cells, h = grid.cells, grid.h
        self.face_grad, self.face_avg, self.face_div, self.cell_grad = [], [], [], []
        for a in range(grid.dim):
            self.cell_grad.append(_lift(_cell_grad(cells[a], h[a]), a, cells))
            # face operators map cell space to the face space of axis a and back
            grad_1d, avg_1d, div_1d = (_face_grad(cells[a], h[a], boundary),
                                       _face_avg(cells[a], boundary), _face_div(cells[a], h[a]))
            self.face_grad.append(_lift(grad_1d, a, cells))
            self.face_avg.append(_lift(avg_1d, a, cells))
            self.face_div.append(_lift(div_1d, a, _face_cells(cells, a)))
        self.second = [self.face_div[a] @ self.face_grad[a] for a in range(grid.dim)]
        self.advect = [(self.face_div[a] @ self.face_avg[a]).tocsr() for a in range(grid.dim)]
        self.mixed = {(a, b): (self.advect[a] @ self.cell_grad[b]).tocsr()
                      for a in range(grid.dim) for b in range(grid.dim) if a != b}

    def laplacian_matrix(self, Sigma: np.ndarray) -> sp.csr_matrix:
        """Sparse matrix of the conservative weighted Laplacian for ``Sigma``
        of shape ``grid.shape + (n, n)``: sum_ij d_i d_j (Sigma_ij rho)."""
        n = self.grid.dim
        S = np.asarray(Sigma).reshape(self.grid.size, n, n)
        total = sp.csr_matrix((self.grid.size, self.grid.size))
        for a in range(n):
            total = total + self.second[a] @ sp.diags(S[:, a, a])
            for b in range(n):
                if a != b and np.any(S[:, a, b]):
                    total = total + self.mixed[(a, b)] @ sp.diags(S[:, a, b])
        return total.tocsr()

    def compact_laplacian_pair(self, Sigma: np.ndarray, theta=None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Weights ``M`` and operator ``N`` with ``M^-1 N`` approximating the
        weighted Laplacian; fourth order for diagonal ``Sigma`` when every
        ``theta`` is 1, the plain stencil when every ``theta`` is 0.

        ``1^T M = 1^T`` and ``1^T N = 0``, so a scheme stepping
        ``M x' = M x + dt N (...)`` conserves mass exactly. Cross-derivative
        terms keep the second-order stencil.
        """
        n = self.grid.dim
        theta = np.ones(n) if theta is None else np.broadcast_to(np.asarray(theta, dtype=float), (n,))
        S = np.asarray(Sigma).reshape(self.grid.size, n, n)
        eye = sp.identity(self.grid.size, format="csr")
        weights = [_lift(_compact_weights(self.grid.cells[a], theta[a]), a, self.grid.cells) for a in range(n)]
        M = reduce(lambda a, b: a @ b, weights, eye)
        N = sp.csr_matrix((self.grid.size, self.grid.size))
        for a in range(n):
            others = reduce(lambda x, y: x @ y, [weights[b] for b in range(n) if b != a], eye)
            N = N + others @ self.second[a] @ sp.diags(S[:, a, a])
            for b in range(n):
                if a != b and np.any(S[:, a, b]):
                    N = N + M @ self.mixed[(a, b)] @ sp.diags(S[:, a, b])
        return M.tocsr(), N.tocsr()

    def advection_divergence(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Flat ``div(x b)`` for a flat density ``x`` and drift ``b`` (size, n)."""
        out = np.zeros_like(x)
        for a in range(self.grid.dim):
            out += self.advect[a] @ (b[:, a] * x)
        return out

    def advection_adjoint(self, y: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`advection_divergence` applied to ``y``."""
        out = np.zeros_like(y)
        for a in range(self.grid.dim):
            out += b[:, a] * (self.advect[a].T @ y)
        return out

    def interior_mask(self, margin: int = 2) -> np.ndarray:
        mask = np.ones(self.grid.shape, dtype=bool)
        for a, n in enumerate(self.grid.cells):
            idx = [slice(None)] * self.grid.dim
            idx[a] = slice(0, margin)
            mask[tuple(idx)] = False
            idx[a] = slice(n - margin, n)
            mask[tuple(idx)] = False
        return mask


# ---------------------------------------------------------------------------
# array-level helpers


def _grad_array(values: np.ndarray, h: tuple[float, ...]) -> np.ndarray:
    parts = [np.gradient(values, h[a], axis=a, edge_order=2) for a in range(len(h))]
    return np.stack(parts, axis=-1)


def _second_partial(values: np.ndarray, i: int, j: int, h: tuple[float, ...]) -> np.ndarray:
    if i != j:
        first = np.gradient(values, h[j], axis=j, edge_order=2)
        return np.gradient(first, h[i], axis=i, edge_order=2)
    v = np.moveaxis(values, i, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h[i] ** 2
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h[i] ** 2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h[i] ** 2
    return np.moveaxis(out, 0, i)


def _hessian_array(values: np.ndarray, h: tuple[float, ...]) -> np.ndarray:
    n = len(h)
    H = np.empty(values.shape + (n, n))
    for i in range(n):
        for j in range(n):
            H[..., i, j] = _second_partial(values, i, j, h) if j >= i else H[..., j, i]
    return H


def _contract(Sigma: np.ndarray, H: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...ij->...", Sigma, H)


def floor_value(values: np.ndarray) -> float:
    return FLOOR_RTOL * float(np.max(values))


def score_array(values: np.ndarray, h: tuple[float, ...],
                counters: Counter | None = None) -> np.ndarray:
    """Central differences of log(max(phi, floor)); raises on nonpositive entries.

    Differencing the logarithm keeps the score accurate where phi varies by
    orders of magnitude across a cell, as in Gaussian tails.
    """
    if np.any(values <= 0):
        raise PositivityError(f"factor has {int(np.sum(values <= 0))} nonpositive cells")
    eps = floor_value(values)
    floored = values < eps
    if counters is not None:
        counters["score_floor"] += int(np.sum(floored))
    # scaling by the maximum makes constants difference to exact zeros
    return _grad_array(np.log(np.where(floored, eps, values) / np.max(values)), h)


def _check_grid(field, ws: OperatorWorkspace):
    if field.grid != ws.grid:
        raise ValueError("field and workspace grids differ")


# ---------------------------------------------------------------------------
# field-level operators


def gradient(field: ScalarField, ws: OperatorWorkspace) -> VectorField:
    _check_grid(field, ws)
    return VectorField(field.grid, _grad_array(field.values, field.grid.h), field.time)


def matrix_divergence(M: MatrixField, ws: OperatorWorkspace) -> VectorField:
    """(div M)_i = sum_j d M_ij / d x_j."""
    _check_grid(M, ws)
    if M.rows != M.cols:
        raise ValueError("matrix divergence needs a square matrix field")
    h = M.grid.h
    n = M.rows
    out = np.zeros(M.grid.shape + (n,))
    for i in range(n):
        for j in range(n):
            out[..., i] += np.gradient(M.values[..., i, j], h[j], axis=j, edge_order=2)
    return VectorField(M.grid, out, M.time)


def _check_sigma(field: ScalarField, Sigma: MatrixField):
    same_grid(field, Sigma)
    n = field.grid.dim
    if Sigma.rows != n or Sigma.cols != n:
        raise ValueError(f"Sigma must be {n}x{n} per cell")


def weighted_laplacian(field: ScalarField, Sigma: MatrixField, ws: OperatorWorkspace) -> ScalarField:
    """Conservative sum_ij d_i d_j (Sigma_ij field); interior cells carry the
    standard nested central stencils."""
    _check_sigma(field, Sigma)
    _check_grid(field, ws)
    W = ws.laplacian_matrix(Sigma.values)
    return ScalarField(field.grid, (W @ field.flat).reshape(field.grid.shape), field.time)


def hessian_contraction(field: ScalarField, Sigma: MatrixField, ws: OperatorWorkspace) -> ScalarField:
    """<Sigma, Hess field>, mixed partials by composed central differences."""
    _check_sigma(field, Sigma)
    _check_grid(field, ws)
    H = _hessian_array(field.values, field.grid.h)
    return ScalarField(field.grid, _contract(Sigma.values, H), field.time)


def advection_divergence(field: ScalarField, drift: VectorField, ws: OperatorWorkspace) -> ScalarField:
    """Conservative div(field * drift) with face-averaged fluxes."""
    _check_grid(field, ws)
    b = drift.values.reshape(field.grid.size, -1)
    out = ws.advection_divergence(field.flat, b)
    return ScalarField(field.grid, out.reshape(field.grid.shape), field.time)


def _product_rule_terms(a: np.ndarray, b: np.ndarray, S: np.ndarray, h):
    ga, gb = _grad_array(a, h), _grad_array(b, h)
    Ha, Hb = _hessian_array(a, h), _hessian_array(b, h)
    n = len(h)
    divS = np.zeros(a.shape + (n,))
    hessS = np.zeros(a.shape)
    for i in range(n):
        for j in range(n):
            divS[..., i] += np.gradient(S[..., i, j], h[j], axis=j, edge_order=2)
            hessS += _second_partial(S[..., i, j], i, j, h)
    return ga, gb, Ha, Hb, divS, hessS


def _product_rule_rhs(a, b, S, h) -> np.ndarray:
    ga, gb, Ha, Hb, divS, hessS = _product_rule_terms(a, b, S, h)
    dot = lambda u, v: np.sum(u * v, axis=-1)  # noqa: E731
    return (a * _contract(S, Hb) + b * _contract(S, Ha)
            + 2 * a * dot(divS, gb) + 2 * b * dot(divS, ga)
            + a * b * hessS + 2 * dot(ga, np.einsum("...ij,...j->...i", S, gb)))


def lemma1_residual(alpha: ScalarField, beta: ScalarField, Sigma: MatrixField,
                    ws: OperatorWorkspace, margin: int = 2) -> float:
    """Max interior gap between the conservative weighted Laplacian of the
    product and its six-term product-rule expansion."""
    _check_sigma(alpha, Sigma)
    same_grid(alpha, beta)
    h = alpha.grid.h
    lhs = weighted_laplacian(alpha * beta, Sigma, ws).values
    rhs = _product_rule_rhs(alpha.values, beta.values, Sigma.values, h)
    return float(np.max(np.abs(lhs - rhs)[ws.interior_mask(margin)]))


def lemma1_special_residuals(alpha: ScalarField, beta: ScalarField, Sigma: MatrixField,
                             ws: OperatorWorkspace, margin: int = 2) -> tuple[float, float]:
    """Residuals of the single-function case (beta = 1) and of the plain
    Laplacian product rule (Sigma = I)."""
    grid = alpha.grid
    h = grid.h
    mask = ws.interior_mask(margin)
    a, b, S = alpha.values, beta.values, Sigma.values
    _, _, _, _, divS, hessS = _product_rule_terms(a, np.ones_like(a), S, h)
    ga, Ha = _grad_array(a, h), _hessian_array(a, h)
    lhs1 = weighted_laplacian(alpha, Sigma, ws).values
    rhs1 = a * hessS + _contract(S, Ha) + 2 * np.sum(divS * ga, axis=-1)
    eye = MatrixField(grid, np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)))
    gb, Hb = _grad_array(b, h), _hessian_array(b, h)
    lap = lambda H: np.trace(H, axis1=-2, axis2=-1)  # noqa: E731
    lhs2 = weighted_laplacian(alpha * beta, eye, ws).values
    rhs2 = a * lap(Hb) + b * lap(Ha) + 2 * np.sum(ga * gb, axis=-1)
    return (float(np.max(np.abs(lhs1 - rhs1)[mask])), float(np.max(np.abs(lhs2 - rhs2)[mask])))


def hessian_log_residual(phi: ScalarField, lam: float, ws: OperatorWorkspace, margin: int = 2) -> float:
    """Max interior gap in lam Hess(log phi) = -(lam/phi^2) grad phi grad phi^T + (lam/phi) Hess phi."""
    _check_grid(phi, ws)
    h = phi.grid.h
    v = phi.values
    lhs = lam * _hessian_array(np.log(v), h)
    g = _grad_array(v, h)
    rhs = (-lam / v**2)[..., None, None] * np.einsum("...i,...j->...ij", g, g) \
        + (lam / v)[..., None, None] * _hessian_array(v, h)
    gap = np.max(np.abs(lhs - rhs), axis=(-2, -1))
    return float(np.max(gap[ws.interior_mask(margin)]))


def score(phi: ScalarField, ws: OperatorWorkspace, counters: Counter | None = None) -> VectorField:
    """grad log phi with the relative floor ``1e-12 * max(phi)``."""
    _check_grid(phi, ws)
    return VectorField(phi.grid, score_array(phi.values, phi.grid.h, counters), phi.time)


def mismatch_at(problem, t: float) -> np.ndarray:
    """lam g g^T - Sigma per cell at time ``t``."""
    return problem.coefficients(t).mismatch


def excess_drift_array(psi: np.ndarray, mismatch: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mismatch, psi)


def excess_reaction_array(psi: np.ndarray, mismatch: np.ndarray) -> np.ndarray:
    return 0.5 * np.einsum("...i,...ij,...j->...", psi, mismatch, psi)


def excess_drift(phi: ScalarField, problem, t: float, ws: OperatorWorkspace,
                 counters: Counter | None = None) -> VectorField:
    """(lam g g^T - Sigma) grad log phi."""
    psi = score(phi, ws, counters).values
    return VectorField(phi.grid, excess_drift_array(psi, mismatch_at(problem, t)), t)


def excess_reaction(phi: ScalarField, problem, t: float, ws: OperatorWorkspace,
                    counters: Counter | None = None) -> ScalarField:
    """Half the quadratic form of the mismatch in grad log phi; sign-indefinite."""
    psi = score(phi, ws, counters).values
    return ScalarField(phi.grid, excess_reaction_array(psi, mismatch_at(problem, t)), t)
