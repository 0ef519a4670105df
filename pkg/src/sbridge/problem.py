"""Control-affine bridge instances, coefficient families and assumption checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import special, stats

from .grid import Grid, MatrixField, SamplingError, ScalarField, sample_array

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-8
COINCIDENCE_RTOL = 1e-12
LAMBDA_FIT_RTOL = 1e-10
NEGATIVE_EIG_TOL = -1e-10
LATTICE_TIMES = 9


class ValidationError(ValueError):
    """The problem violates a hard requirement (bad coefficients or densities)."""


# ---------------------------------------------------------------------------
# coefficient families (callables of (t, x) with x of shape (..., n))


@dataclass(frozen=True)
class ZeroDrift:
    n: int

    def __call__(self, t, x):
        return np.zeros(np.shape(x)[:-1] + (self.n,))


@dataclass(frozen=True)
class LinearDrift:
    """f(t, x) = A x (a scalar ``A`` means ``A * I``)."""

    A: np.ndarray

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 0:
            return A * x
        return x @ A.T


@dataclass(frozen=True)
class ConstantMatrix:
    """Constant ``rows x cols`` matrix coefficient (input or noise matrix)."""

    M: np.ndarray

    def __call__(self, t, x):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        return np.broadcast_to(M, np.shape(x)[:-1] + M.shape)


@dataclass(frozen=True)
class ConstantCost:
    c: float = 0.0

    def __call__(self, t, x):
        return np.full(np.shape(x)[:-1], float(self.c))


@dataclass(frozen=True)
class QuadraticCost:
    """q(t, x) = weight * |x - center|^2."""

    weight: float
    center: tuple = ()

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center if len(self.center) else np.zeros(x.shape[-1]), dtype=float)
        return self.weight * np.sum((x - c) ** 2, axis=-1)


@dataclass(frozen=True, eq=False)
class TabulatedCoefficient:
    """Coefficient given as a grid table; only evaluable on that grid's centers."""

    grid: Grid
    values: np.ndarray

    def __call__(self, t, x):
        if np.shape(x)[:-1] != self.grid.shape:
            raise SamplingError("tabulated coefficient evaluated off its grid")
        return np.asarray(self.values, dtype=float)


# ---------------------------------------------------------------------------
# endpoint densities


@dataclass(frozen=True)
class GaussianDensity:
    mean: tuple
    cov: tuple

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValidationError("Gaussian covariance shape does not match the mean")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValidationError("Gaussian covariance must be positive definite")
        object.__setattr__(self, "mean", tuple(mean))
        object.__setattr__(self, "cov", tuple(map(tuple, cov)))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean)
        cov = np.asarray(self.cov)
        d = np.asarray(x, dtype=float) - mean
        inv = np.linalg.inv(cov)
        quad = np.einsum("...i,ij,...j->...", d, inv, d)
        norm = np.sqrt((2 * np.pi) ** mean.size * np.linalg.det(cov))
        return np.exp(-0.5 * quad) / norm

    def mass_in_box(self, grid: Grid) -> float:
        mean = np.asarray(self.mean)
        cov = np.asarray(self.cov)
        if mean.size == 1:
            s = np.sqrt(cov[0, 0] * 2.0)
            lo, hi = grid.lower[0], grid.upper[0]
            return float(0.5 * (special.erf((hi - mean[0]) / s) - special.erf((lo - mean[0]) / s)))
        # complement mass bounds the truncation error; mvn cdf is accurate to ~1e-8 only
        dist = stats.multivariate_normal(mean=mean, cov=cov)
        return float(dist.cdf(np.array(grid.upper), lower_limit=np.array(grid.lower)))

    def on(self, grid: Grid) -> np.ndarray:
        if len(self.mean) != grid.dim:
            raise ValidationError("density dimension does not match grid")
        return self.pdf(grid.points())


@dataclass(frozen=True, eq=False)
class TabulatedDensity:
    grid: Grid
    values: np.ndarray

    def mass_in_box(self, grid: Grid) -> float:
        return 1.0

    def on(self, grid: Grid) -> np.ndarray:
        if grid != self.grid and grid.cells != self.grid.cells:
            raise ValidationError("tabulated density lives on a different grid")
        return np.asarray(self.values, dtype=float).reshape(grid.shape)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coefficients:
    """All coefficient samples at one time; arrays carry the grid shape first."""

    t: float
    f: np.ndarray
    g: np.ndarray
    sigma: np.ndarray
    Sigma: np.ndarray
    q: np.ndarray
    ggT: np.ndarray
    mismatch: np.ndarray


@dataclass(frozen=True, eq=False)
class BridgeProblem:
    """A control-affine bridge: dx = (f + g u) dt + sigma dw from rho0 to rho1.

    ``lam=None`` selects the default scale (the coincident value when one
    exists, else a trace ratio); see :func:`default_lambda`.
    """

    grid: Grid
    f: Callable
    g: Callable
    sigma: Callable
    q: Callable
    rho0: object
    rho1: object
    lam: float | None = None
    name: str = "bridge"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValidationError("lambda must be positive")

    @property
    def n(self) -> int:
        return self.grid.dim

    @property
    def m(self) -> int:
        return self.coefficients(self.grid.t0).g.shape[-1]

    @property
    def p(self) -> int:
        return self.coefficients(self.grid.t0).sigma.shape[-1]

    @property
    def lam_value(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        if "lam" not in self._cache:
            self._cache["lam"] = default_lambda(self)
        return self._cache["lam"]

    def with_lambda(self, lam: float | None) -> "BridgeProblem":
        return replace(self, lam=lam, _cache={})

    def with_grid(self, grid: Grid) -> "BridgeProblem":
        return replace(self, grid=grid, _cache={})

    def raw_coefficients(self, t: float) -> tuple[np.ndarray, ...]:
        grid = self.grid
        n = grid.dim
        f = sample_array(self.f, grid, t, "vector")
        g = sample_array(self.g, grid, t, "matrix")
        sigma = sample_array(self.sigma, grid, t, "matrix")
        q = sample_array(self.q, grid, t, "scalar")
        if f.shape[-1] != n or g.shape[-2] != n or sigma.shape[-2] != n:
            raise ValidationError("coefficient shapes do not match the state dimension")
        return f, g, sigma, q

    def coefficients(self, t: float) -> Coefficients:
        key = ("coef", float(t))
        hit = self._cache.get(key)
        if hit is None:
            f, g, sigma, q = self.raw_coefficients(t)
            Sigma = sigma @ np.swapaxes(sigma, -1, -2)
            Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
            ggT = g @ np.swapaxes(g, -1, -2)
            mismatch = self.lam_value * ggT - Sigma
            hit = Coefficients(float(t), f, g, sigma, Sigma, q, ggT, mismatch)
            self._cache[key] = hit
        return hit

    def density(self, which: int) -> ScalarField:
        """Endpoint density on the grid, renormalized to unit mass."""
        key = ("rho", which)
        if key not in self._cache:
            spec = self.rho0 if which == 0 else self.rho1
            values = np.asarray(spec.on(self.grid), dtype=float)
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise ValidationError(f"rho{which} must be finite and nonnegative")
            total = float(np.sum(values) * self.grid.cell_volume)
            if not total > 0:
                raise ValidationError(f"rho{which} has no mass on the grid")
            self._cache[key] = ScalarField(self.grid, values / total, self.grid.t0 if which == 0 else self.grid.t1)
        return self._cache[key]

    @property
    def rho0_field(self) -> ScalarField:
        return self.density(0)

    @property
    def rho1_field(self) -> ScalarField:
        return self.density(1)

    def is_time_invariant(self) -> bool:
        """Coefficients agree at t0, the midpoint and t1 (three-time probe)."""
        if "invariant" not in self._cache:
            g = self.grid
            probes = [self.raw_coefficients(t) for t in (g.t0, 0.5 * (g.t0 + g.t1), g.t1)]
            same = all(np.array_equal(a, b) for p in probes[1:] for a, b in zip(probes[0], p))
            self._cache["invariant"] = same
        return self._cache["invariant"]


def build_sigma_tensor(problem: BridgeProblem, t: float) -> MatrixField:
    """Per-cell diffusion tensor sigma sigma^T."""
    _, _, sigma, _ = problem.raw_coefficients(t)
    Sigma = sigma @ np.swapaxes(sigma, -1, -2)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    return MatrixField(problem.grid, Sigma, t)


def _lattice(problem: BridgeProblem):
    g = problem.grid
    for t in np.linspace(g.t0, g.t1, LATTICE_TIMES):
        _, gm, sigma, _ = problem.raw_coefficients(float(t))
        Sigma = sigma @ np.swapaxes(sigma, -1, -2)
        yield gm @ np.swapaxes(gm, -1, -2), 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))


def _fro(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def coincident_lambda(problem: BridgeProblem) -> float | None:
    """Least-squares lambda with lambda g g^T = Sigma, or None when no single
    positive value makes the mismatch vanish on the sampling lattice."""
    num = den = 0.0
    max_sigma = 0.0
    pairs = list(_lattice(problem))
    for ggT, Sigma in pairs:
        num += float(np.sum(ggT * Sigma))
        den += float(np.sum(ggT * ggT))
        max_sigma = max(max_sigma, float(np.max(_fro(Sigma))))
    if den == 0.0:
        logger.warning("input matrix g vanishes on the sampling lattice; no coincident lambda")
        return None
    lam = num / den
    if not lam > 0:
        return None
    mismatch = max(float(np.max(_fro(lam * ggT - Sigma))) for ggT, Sigma in pairs)
    if mismatch <= LAMBDA_FIT_RTOL * max_sigma:
        return lam
    return None


def default_lambda(problem: BridgeProblem) -> float:
    lam = coincident_lambda(problem)
    if lam is not None:
        return lam
    tr_g = tr_s = 0.0
    for ggT, Sigma in _lattice(problem):
        tr_g += float(np.sum(np.trace(ggT, axis1=-2, axis2=-1)))
        tr_s += float(np.sum(np.trace(Sigma, axis1=-2, axis2=-1)))
    if tr_g <= 0 or tr_s <= 0:
        return 1.0
    return tr_s / tr_g


@dataclass
class ValidationReport:
    sigma_lower_bound_estimate: float
    channel_mismatch_norm: float
    is_channel_coincident: bool
    lam: float
    coincident_lambda: float | None
    mass_in_box: tuple[float, float]
    warnings: list[str] = field(default_factory=list)

    @property
    def regime(self) -> str:
        return "linear" if self.is_channel_coincident else "nonlinear"

    def lines(self) -> list[str]:
        out = [
            f"sigma_lower_bound_estimate={self.sigma_lower_bound_estimate!r}",
            f"channel_mismatch_norm={self.channel_mismatch_norm!r}",
            f"is_channel_coincident={'true' if self.is_channel_coincident else 'false'}",
            f"lambda={self.lam!r}",
            f"coincident_lambda={'none' if self.coincident_lambda is None else repr(self.coincident_lambda)}",
            f"regime={self.regime}",
            f"rho0_mass_in_box={self.mass_in_box[0]!r}",
            f"rho1_mass_in_box={self.mass_in_box[1]!r}",
        ]
        out += [f"warning: {w}" for w in self.warnings]
        return out


def validate(problem: BridgeProblem) -> ValidationReport:
    """Check the standing assumptions on the sampling lattice.

    Lipschitz/growth bounds cannot be certified from samples and are only
    noted. Raises :class:`ValidationError` on non-finite coefficients, an
    indefinite diffusion tensor, or endpoint mass leaking out of the box.
    """
    warnings = ["Lipschitz and linear-growth bounds on f, sigma are not checked numerically"]
    min_eig = np.inf
    mismatch = 0.0
    max_sigma = 0.0
    try:
        lam = problem.lam_value
        pairs = list(_lattice(problem))
    except SamplingError as exc:
        raise ValidationError(str(exc)) from exc
    for ggT, Sigma in pairs:
        min_eig = min(min_eig, float(np.min(np.linalg.eigvalsh(Sigma))))
        mismatch = max(mismatch, float(np.max(_fro(lam * ggT - Sigma))))
        max_sigma = max(max_sigma, float(np.max(_fro(Sigma))))
    if min_eig < NEGATIVE_EIG_TOL:
        raise ValidationError(f"diffusion tensor has eigenvalue {min_eig:.3e} < 0")
    if min_eig <= 0:
        warnings.append(f"empirical lower bound of the diffusion tensor is {min_eig:.3e} <= 0")

    masses = []
    for which, spec in ((0, problem.rho0), (1, problem.rho1)):
        mass = float(spec.mass_in_box(problem.grid))
        if mass < 1 - MASS_TOLERANCE:
            raise ValidationError(f"rho{which} has only mass {mass:.10f} inside the box")
        problem.density(which)
        masses.append(mass)

    coincident = mismatch <= COINCIDENCE_RTOL * max_sigma
    lam_star = coincident_lambda(problem)
    if problem.lam is None:
        warnings.append(f"lambda chosen automatically: {lam!r}")
    if not coincident:
        warnings.append("control and noise channels differ: nonlinear factor equations")
    return ValidationReport(
        sigma_lower_bound_estimate=min_eig,
        channel_mismatch_norm=mismatch,
        is_channel_coincident=bool(coincident),
        lam=lam,
        coincident_lambda=lam_star,
        mass_in_box=(masses[0], masses[1]),
        warnings=warnings,
    )


def classical_problem(grid: Grid, mean0=-1.0, mean1=1.0, var=0.25, g=1.0, sigma=1.0,
                      lam: float | None = 1.0) -> BridgeProblem:
    """1D bridge with zero drift and cost and Gaussian endpoints."""
    return BridgeProblem(
        grid=grid,
        f=ZeroDrift(1),
        g=ConstantMatrix(np.array([[g]])),
        sigma=ConstantMatrix(np.array([[sigma]])),
        q=ConstantCost(0.0),
        rho0=GaussianDensity((mean0,), ((var,),)),
        rho1=GaussianDensity((mean1,), ((var,),)),
        lam=lam,
        name="classical",
    )

