"""Independent reference solutions.

* a static Sinkhorn matrix scaling with a Gaussian heat-kernel Gibbs matrix,
  which for zero drift and cost with ``lam g g^T = Sigma = I`` yields the
  endpoint factors of the dynamic problem;
* closed-form Gaussian heat flow;
* the exact fixed point of two-point matrix scaling.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .grid import Grid


class StaticSinkhorn(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    iterations: int
    history: list
    converged: bool


def heat_kernel_matrix(grid: Grid, variance: float) -> np.ndarray:
    """Gibbs matrix ``K_ij = N(x_j; x_i, variance I) * cell_volume`` on cell centers.

    Entries that underflow are lifted to the smallest positive double so the
    kernel stays strictly positive."""
    if not variance > 0:
        raise ValueError("heat kernel variance must be positive")
    pts = grid.points().reshape(-1, grid.dim)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    norm = (2 * np.pi * variance) ** (-grid.dim / 2)
    return np.maximum(norm * np.exp(-d2 / (2 * variance)) * grid.cell_volume, np.finfo(float).tiny)


def _hilbert(a: np.ndarray, b: np.ndarray) -> float:
    r = np.log(a) - np.log(b)
    return float(np.max(r) - np.min(r))


def static_sinkhorn(K: np.ndarray, mu: np.ndarray, nu: np.ndarray, tol: float = 1e-12,
                    max_iter: int = 10000) -> StaticSinkhorn:
    """Scale ``K`` so that ``diag(u) K diag(v)`` has row sums ``mu`` and column sums ``nu``."""
    K = np.asarray(K, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(K <= 0):
        raise ValueError("static Sinkhorn needs an entrywise positive kernel")
    tiny = np.finfo(float).tiny
    v = np.ones(K.shape[1])
    history = []
    for it in range(1, max_iter + 1):
        u = np.maximum(mu, tiny) / np.maximum(K @ v, tiny)
        v_new = np.maximum(nu, tiny) / np.maximum(K.T @ u, tiny)
        d = _hilbert(v_new, v)
        history.append(d)
        v = v_new
        if d <= tol:
            return StaticSinkhorn(u, v, it, history, True)
    return StaticSinkhorn(u, v, max_iter, history, False)


def bridge_from_static(grid: Grid, rho0: np.ndarray, rho1: np.ndarray, variance: float,
                       tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, StaticSinkhorn]:
    """Endpoint factors ``(phihat(t0), phi(t1))`` from the static problem.

    With cell masses ``rho * h`` the scaled coupling is
    ``u_i K_ij v_j`` where ``u = phihat0 * h`` and ``v = phi1``.
    """
    h = grid.cell_volume
    K = heat_kernel_matrix(grid, variance)
    res = static_sinkhorn(K, np.ravel(rho0) * h, np.ravel(rho1) * h, tol=tol)
    return (res.u / h).reshape(grid.shape), res.v.reshape(grid.shape), res


def essential_support(density: np.ndarray, tail_mass: float = 1e-6) -> np.ndarray:
    """Mask of the heaviest cells, dropping the lightest cells whose total
    share of the mass stays below ``tail_mass``.

    Far-tail factor values are set by floors and round-off rather than by
    the scaling problem, so projective comparisons are restricted to this set.
    """
    w = np.clip(np.asarray(density, dtype=float), 0.0, None)
    flat = w.reshape(-1)
    order = np.argsort(flat, kind="stable")
    dropped = np.cumsum(flat[order]) <= tail_mass * flat.sum()
    mask = np.ones(flat.size, dtype=bool)
    mask[order[dropped]] = False
    return mask.reshape(w.shape)


def projective_gap(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Hilbert distance of two positive arrays restricted to ``mask``."""
    return _hilbert(np.asarray(a)[mask], np.asarray(b)[mask])


def gaussian_heat_flow(x: np.ndarray, mean: float, variance: float, elapsed: float,
                       diffusivity: float = 1.0) -> np.ndarray:
    """Density of ``N(mean, variance)`` after heat flow ``rho_t = (D/2) rho_xx``."""
    s = variance + diffusivity * elapsed
    return np.exp(-((np.asarray(x) - mean) ** 2) / (2 * s)) / np.sqrt(2 * np.pi * s)


def two_point_scaling(K: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form scaling of a positive 2x2 matrix, normalized so ``v[0] = 1``.

    The coupling ``P = diag(u) K diag(v)`` with marginals ``mu``, ``nu`` is
    fixed by its cross ratio ``P00 P11 / (P01 P10) = K00 K11 / (K01 K10)``;
    writing ``P00 = p`` leaves one quadratic in ``p``.
    """
    K = np.asarray(K, dtype=float)
    a, b = float(mu[0]), float(mu[1])
    c = float(nu[0])
    r = K[0, 0] * K[1, 1] / (K[0, 1] * K[1, 0])
    # p (b - c + p) = r (a - p) (c - p)
    A = 1 - r
    B = (b - c) + r * (a + c)
    C = -r * a * c
    if abs(A) < 1e-15:
        p = -C / B
    else:
        disc = np.sqrt(B * B - 4 * A * C)
        roots = [(-B + disc) / (2 * A), (-B - disc) / (2 * A)]
        lo, hi = max(0.0, c - b), min(a, c)
        p = next(z for z in roots if lo - 1e-15 <= z <= hi + 1e-15)
    P = np.array([[p, a - p], [c - p, b - c + p]])
    v0 = 1.0
    u0 = P[0, 0] / (K[0, 0] * v0)
    v1 = P[0, 1] / (K[0, 1] * u0)
    u1 = P[1, 0] / (K[1, 0] * v0)
    return np.array([u0, u1]), np.array([v0, v1])
