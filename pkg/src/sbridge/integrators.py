"""Time steppers for the factor equations and the controlled density equation.

Every forward step is a linear map ``P_k`` on flat cell arrays built from the
face-flux operators of :class:`~sbridge.operators.OperatorWorkspace`:

* ``imex-cn``: Strang splitting ``E(dt/2) C(dt) E(dt/2)`` where ``C`` is
  Crank-Nicolson on ``0.5 * weighted Laplacian`` and ``E`` is Heun's method
  on advection plus reaction, sub-cycled to respect the advective CFL limit.
  By default ``C`` uses the compact form ``(M - dt/2 N) x' = (M + dt/2 N) x``
  of the diagonal diffusion terms, fourth order in space once
  ``dt * Sigma_aa >= h_a^2 / 3`` and blended toward the plain stencil below
  that, where the full correction would break positivity. ``C`` is split
  into equal Crank-Nicolson substeps so that ``tau * Sigma_aa / h_a^2``
  stays at most ``max_diffusion_number``.
* ``explicit-rk2``: Heun's method on the full generator; CFL violations raise.

Backward steps apply ``P_k^T`` exactly. The backward generator is therefore
the discrete adjoint of the zero-flux forward generator, which keeps
``integrate(phihat(t) * phi(t))`` constant in ``t`` to rounding error.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import Grid, ScalarField
from .operators import (OperatorWorkspace, PositivityError, excess_drift_array,
                        excess_reaction_array, score_array)

SCHEMES = ("imex-cn", "explicit-rk2")
DIVERGENCE_GROWTH = 1e6
NEGATIVE_DENSITY_TOL = 1e-10


class CFLError(ArithmeticError):
    pass


class DivergenceError(ArithmeticError):
    pass


class NegativeDensityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class StepScheme:
    kind: str = "imex-cn"
    cfl_safety: float = 0.5
    compact: bool = True
    max_diffusion_number: float = 2.0 / 3.0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if not self.max_diffusion_number > 0:
            raise ValueError("max_diffusion_number must be positive")


@dataclass(eq=False)
class FactorTrajectory:
    """Fields at all ``num_steps + 1`` time nodes; index 0 is ``t0``.

    ``step_scores`` holds, for nonlinear backward passes, the score field
    used on each step so a forward pass can reuse exactly the same excess
    drift and reaction.
    """

    grid: Grid
    direction: str
    values: np.ndarray
    step_scores: np.ndarray | None = None
    counters: Counter = field(default_factory=Counter)
    positive: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = (self.grid.num_steps + 1,) + self.grid.shape
        if vals.shape != expected:
            vals = vals.reshape(expected)
        if not np.all(np.isfinite(vals)):
            raise ValueError("trajectory contains non-finite values")
        if self.positive and np.any(vals <= 0):
            raise PositivityError("factor trajectory must be strictly positive")
        vals.setflags(write=False)
        self.values = vals

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times()

    def at(self, k: int) -> ScalarField:
        return ScalarField(self.grid, self.values[k], float(self.times[k]))

    @property
    def first(self) -> ScalarField:
        return self.at(0)

    @property
    def last(self) -> ScalarField:
        return self.at(len(self) - 1)

    def scaled(self, c: float) -> "FactorTrajectory":
        return FactorTrajectory(self.grid, self.direction, self.values * c,
                                self.step_scores, Counter(self.counters), self.positive)


class Propagator:
    """One-step maps ``P_k`` for a problem; caches Crank-Nicolson factorizations."""

    def __init__(self, problem, scheme: StepScheme | None = None, ws: OperatorWorkspace | None = None):
        self.problem = problem
        self.scheme = scheme or StepScheme()
        self.grid = problem.grid
        self.ws = ws or OperatorWorkspace(problem.grid, "zero-flux")
        self.dt = self.grid.dt
        self.lam = problem.lam_value
        self._invariant = problem.is_time_invariant()
        self._diffusion: dict = {}
        self._min_h = np.asarray(self.grid.h)

    def t_mid(self, k: int) -> float:
        g = self.grid
        return g.t0 + (k + 0.5) * g.dt

    def coefficients(self, k: int):
        t = self.grid.t0 if self._invariant else self.t_mid(k)
        return self.problem.coefficients(t)

    def _diffusion_for(self, k: int):
        key = 0 if self._invariant else k
        hit = self._diffusion.get(key)
        if hit is None:
            co = self.coefficients(k)
            D = 0.5 * self.ws.laplacian_matrix(co.Sigma)
            subs = self._diffusion_substeps(co.Sigma) if self.scheme.kind == "imex-cn" else 1
            tau = self.dt / subs
            half = 0.5 * tau
            if self.scheme.kind == "imex-cn" and self.scheme.compact:
                M, N = self.ws.compact_laplacian_pair(co.Sigma, self._compact_theta(co.Sigma, tau))
                N = 0.5 * N
            else:
                M, N = sp.identity(self.grid.size, format="csr"), D
            explicit = (M + half * N).tocsr()
            lu = splu((M - half * N).tocsc()) if self.scheme.kind == "imex-cn" else None
            max_eig = float(np.max(np.linalg.eigvalsh(co.Sigma.reshape(-1, self.grid.dim, self.grid.dim))))
            hit = (D.tocsr(), explicit, lu, max_eig, subs)
            self._diffusion[key] = hit
        return hit

    def _diffusion_numbers(self, Sigma: np.ndarray) -> np.ndarray:
        """Per-axis ``Sigma_aa / h_a^2`` as (min, max) rows."""
        n = self.grid.dim
        diag = np.diagonal(Sigma.reshape(-1, n, n), axis1=1, axis2=2)
        h2 = np.asarray(self.grid.h) ** 2
        return np.stack([diag.min(axis=0), diag.max(axis=0)]) / h2

    def _diffusion_substeps(self, Sigma: np.ndarray) -> int:
        """Crank-Nicolson substeps keeping ``tau * Sigma_aa / h_a^2`` at most
        ``scheme.max_diffusion_number``; CN barely damps stiffer modes."""
        top = float(np.max(self._diffusion_numbers(Sigma)[1]))
        return max(1, math.ceil(self.dt * top / self.scheme.max_diffusion_number - 1e-12))

    def _compact_theta(self, Sigma: np.ndarray, tau: float) -> np.ndarray:
        """Per-axis weight of the fourth-order correction, capped so that the
        implicit matrix keeps nonpositive off-diagonals (an M-matrix)."""
        return np.clip(3.0 * tau * self._diffusion_numbers(Sigma)[0], 0.0, 1.0)

    # -- coefficient assembly -------------------------------------------------

    def base(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        co = self.coefficients(k)
        size, n = self.grid.size, self.grid.dim
        return co.f.reshape(size, n), (co.q / self.lam).reshape(size)

    def with_score(self, k: int, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Drift f + f_phi and reaction q/lam + q_phi for a score ``psi``."""
        co = self.coefficients(k)
        size, n = self.grid.size, self.grid.dim
        M = co.mismatch
        b = co.f + excess_drift_array(psi, M)
        c = co.q / self.lam + excess_reaction_array(psi, M)
        return b.reshape(size, n), c.reshape(size)

    def with_control(self, k: int, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        co = self.coefficients(k)
        size, n = self.grid.size, self.grid.dim
        b = co.f + np.einsum("...ij,...j->...i", co.g, u)
        return b.reshape(size, n), np.zeros(size)

    # -- explicit part --------------------------------------------------------

    def _substeps(self, tau: float, b: np.ndarray, c: np.ndarray) -> int:
        rate = float(np.max(np.abs(b) / self._min_h)) if b.size else 0.0
        rate = max(rate, float(np.max(np.abs(c))) if c.size else 0.0)
        return max(1, math.ceil(tau * rate / self.scheme.cfl_safety - 1e-12))

    def _explicit(self, x, tau, b, c, adjoint: bool):
        if not np.any(b) and not np.any(c):
            return x
        ws = self.ws
        advect = ws.advection_adjoint if adjoint else ws.advection_divergence

        def A(v):
            return -advect(v, b) - c * v

        nsub = self._substeps(tau, b, c)
        ts = tau / nsub
        for _ in range(nsub):
            Ax = A(x)
            x = x + ts * Ax + 0.5 * ts * ts * A(Ax)
        return x

    # -- full steps -----------------------------------------------------------

    def forward(self, x: np.ndarray, k: int, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        D, explicit, lu, max_eig, subs = self._diffusion_for(k)
        dt = self.dt
        if self.scheme.kind == "explicit-rk2":
            self._check_cfl(b, max_eig)
            ws = self.ws

            def L(v):
                return D @ v - ws.advection_divergence(v, b) - c * v

            Lx = L(x)
            return x + dt * Lx + 0.5 * dt * dt * L(Lx)
        x = self._explicit(x, 0.5 * dt, b, c, adjoint=False)
        for _ in range(subs):
            x = lu.solve(explicit @ x)
        return self._explicit(x, 0.5 * dt, b, c, adjoint=False)

    def backward(self, y: np.ndarray, k: int, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Apply ``P_k^T``."""
        D, explicit, lu, max_eig, subs = self._diffusion_for(k)
        dt = self.dt
        if self.scheme.kind == "explicit-rk2":
            self._check_cfl(b, max_eig)
            ws = self.ws
            DT = D.T.tocsr()

            def LT(v):
                return DT @ v - ws.advection_adjoint(v, b) - c * v

            Ly = LT(y)
            return y + dt * Ly + 0.5 * dt * dt * LT(Ly)
        y = self._explicit(y, 0.5 * dt, b, c, adjoint=True)
        for _ in range(subs):
            y = explicit.T @ lu.solve(y, trans="T")
        return self._explicit(y, 0.5 * dt, b, c, adjoint=True)

    def _check_cfl(self, b: np.ndarray, max_eig: float) -> None:
        dt, cfl = self.dt, self.scheme.cfl_safety
        h = float(np.min(self._min_h))
        vmax = float(np.max(np.abs(b))) if b.size else 0.0
        if vmax > 0 and dt > cfl * h / vmax:
            raise CFLError(f"dt={dt:.3e} exceeds advective limit {cfl * h / vmax:.3e}")
        if max_eig > 0 and dt > cfl * h * h / (2 * max_eig):
            raise CFLError(f"dt={dt:.3e} exceeds diffusive limit {cfl * h * h / (2 * max_eig):.3e}")


def _require_positive(x: np.ndarray, k: int, what: str) -> None:
    if not np.all(x > 0):
        bad = int(np.sum(~(x > 0)))
        raise PositivityError(f"{what}: {bad} nonpositive cells after step {k}")


def _flat(field_or_array, grid: Grid) -> np.ndarray:
    vals = field_or_array.values if isinstance(field_or_array, ScalarField) else field_or_array
    return np.asarray(vals, dtype=float).reshape(grid.size).copy()


def _propagator(problem, scheme, propagator):
    if propagator is not None:
        return propagator
    return Propagator(problem, scheme)


def backward_phi_linear(terminal: ScalarField, problem, scheme: StepScheme | None = None,
                        propagator: Propagator | None = None) -> FactorTrajectory:
    """Integrate the linear backward factor equation from t1 down to t0."""
    prop = _propagator(problem, scheme, propagator)
    grid = problem.grid
    K = grid.num_steps
    y = _flat(terminal, grid)
    _require_positive(y, K, "terminal factor")
    out = np.empty((K + 1, grid.size))
    out[K] = y
    for k in range(K - 1, -1, -1):
        b, c = prop.base(k)
        y = prop.backward(y, k, b, c)
        _require_positive(y, k, "backward factor")
        out[k] = y
    return FactorTrajectory(grid, "backward", out)


def backward_phi_nonlinear(terminal: ScalarField, problem, scheme: StepScheme | None = None,
                           propagator: Propagator | None = None) -> FactorTrajectory:
    """Backward factor equation with excess drift/reaction from the current iterate.

    Each step predicts with the score at the later node, then repeats the
    step with the mean of the predicted and later scores.
    """
    prop = _propagator(problem, scheme, propagator)
    grid = problem.grid
    K, h = grid.num_steps, grid.h
    counters: Counter = Counter()
    y = _flat(terminal, grid)
    _require_positive(y, K, "terminal factor")
    out = np.empty((K + 1, grid.size))
    scores = np.empty((K,) + grid.shape + (grid.dim,))
    out[K] = y
    for k in range(K - 1, -1, -1):
        psi_late = score_array(y.reshape(grid.shape), h, counters)
        b, c = prop.with_score(k, psi_late)
        pred = prop.backward(y, k, b, c)
        _require_positive(pred, k, "backward factor (predictor)")
        psi = 0.5 * (psi_late + score_array(pred.reshape(grid.shape), h, counters))
        b, c = prop.with_score(k, psi)
        x = prop.backward(y, k, b, c)
        _require_positive(x, k, "backward factor")
        if np.max(x) > DIVERGENCE_GROWTH * np.max(y):
            raise DivergenceError(f"backward factor grew by more than {DIVERGENCE_GROWTH:g}x at step {k}")
        scores[k] = psi
        out[k] = x
        y = x
    return FactorTrajectory(grid, "backward", out, step_scores=scores, counters=counters)


def forward_phihat_linear(initial: ScalarField, problem, scheme: StepScheme | None = None,
                          propagator: Propagator | None = None) -> FactorTrajectory:
    prop = _propagator(problem, scheme, propagator)
    grid = problem.grid
    K = grid.num_steps
    x = _flat(initial, grid)
    _require_positive(x, 0, "initial factor")
    out = np.empty((K + 1, grid.size))
    out[0] = x
    for k in range(K):
        b, c = prop.base(k)
        x = prop.forward(x, k, b, c)
        _require_positive(x, k, "forward factor")
        out[k + 1] = x
    return FactorTrajectory(grid, "forward", out)


def step_scores(phi_traj: FactorTrajectory, counters: Counter | None = None) -> np.ndarray:
    """Per-step scores: saved ones, or the mean of the node scores."""
    if phi_traj.step_scores is not None:
        return phi_traj.step_scores
    grid = phi_traj.grid
    node = [score_array(v, grid.h, counters) for v in phi_traj.values]
    return np.array([0.5 * (node[k] + node[k + 1]) for k in range(grid.num_steps)])


def forward_phihat_nonlinear(initial: ScalarField, phi_traj: FactorTrajectory, problem,
                             scheme: StepScheme | None = None,
                             propagator: Propagator | None = None) -> FactorTrajectory:
    """Forward factor equation with excess terms frozen from ``phi_traj``."""
    prop = _propagator(problem, scheme, propagator)
    grid = problem.grid
    if phi_traj.grid.num_steps != grid.num_steps or phi_traj.grid.cells != grid.cells:
        raise ValueError("phi trajectory does not cover the problem's time nodes")
    K = grid.num_steps
    counters: Counter = Counter()
    psi_steps = step_scores(phi_traj, counters)
    x = _flat(initial, grid)
    _require_positive(x, 0, "initial factor")
    out = np.empty((K + 1, grid.size))
    out[0] = x
    for k in range(K):
        b, c = prop.with_score(k, psi_steps[k])
        x = prop.forward(x, k, b, c)
        _require_positive(x, k, "forward factor")
        out[k + 1] = x
    return FactorTrajectory(grid, "forward", out, counters=counters)


def fpk_forward(initial: ScalarField, control, problem, scheme: StepScheme | None = None,
                propagator: Propagator | None = None) -> FactorTrajectory:
    """Controlled density equation; ``control`` has shape ``(K+1,) + shape + (m,)``.

    The control on a step is the mean of its two node values. Undershoots
    down to ``-1e-10`` are clipped and counted; deeper ones raise.
    """
    prop = _propagator(problem, scheme, propagator)
    grid = problem.grid
    K = grid.num_steps
    u = np.asarray(getattr(control, "values", control), dtype=float)
    if u.shape[0] != K + 1:
        raise ValueError("control must be given at every time node")
    counters: Counter = Counter()
    x = _flat(initial, grid)
    if np.any(x < 0):
        raise NegativeDensityError("initial density is negative")
    out = np.empty((K + 1, grid.size))
    out[0] = x
    for k in range(K):
        b, c = prop.with_control(k, 0.5 * (u[k] + u[k + 1]))
        x = prop.forward(x, k, b, c)
        if np.min(x) < -NEGATIVE_DENSITY_TOL:
            raise NegativeDensityError(f"density reached {np.min(x):.3e} at step {k}")
        neg = x < 0
        if neg.any():
            counters["negative_clip"] += int(np.sum(neg))
            x = np.where(neg, 0.0, x)
        out[k + 1] = x
    return FactorTrajectory(grid, "forward", out, counters=counters, positive=False)
