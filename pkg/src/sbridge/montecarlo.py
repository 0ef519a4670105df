"""Sample-path check of PDE solutions: Euler-Maruyama under a gridded feedback.

Random numbers come from a single ``numpy.random.Philox`` stream seeded by
the caller. Draws happen in a fixed order (initial cells, initial offsets,
then one ``(N, p)`` normal block per Euler-Maruyama step), so results are
bit-for-bit reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, SamplingError, ScalarField
from .io import coordinate_names, write_csv

RNG_ALGORITHM = "Philox4x64-10"


@dataclass(frozen=True, eq=False)
class SdeEnsemble:
    particle_count: int
    seed: int
    states: np.ndarray
    time_index: int
    exits: int = 0

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be at least 1")
        states = np.array(self.states, dtype=float).reshape(self.particle_count, -1)
        if not np.all(np.isfinite(states)):
            raise ValueError("ensemble states must be finite")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_density(density: np.ndarray, grid: Grid, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw cells by inverse CDF over the row-major cell masses, then a uniform
    offset inside the cell. This equals per-axis conditional sampling of the
    piecewise-constant density."""
    w = np.clip(np.asarray(density, dtype=float).reshape(-1), 0.0, None)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    cells = np.searchsorted(cdf, rng.random(count), side="right")
    cells = np.minimum(cells, grid.size - 1)
    idx = np.stack(np.unravel_index(cells, grid.shape), axis=-1)
    offsets = rng.random((count, grid.dim))
    return np.asarray(grid.lower) + (idx + offsets) * np.asarray(grid.h)


def interpolate(grid: Grid, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of cell-center values at points ``x`` (N, n);
    points beyond the outermost centers take the edge value."""
    values = np.asarray(values, dtype=float)
    trailing = values.shape[grid.dim:]
    flat = values.reshape(grid.shape + (-1,))
    lo = np.asarray(grid.lower) + 0.5 * np.asarray(grid.h)
    pos = (x - lo) / np.asarray(grid.h)
    cells = np.asarray(grid.cells)
    pos = np.clip(pos, 0.0, cells - 1.0)
    base = np.minimum(np.floor(pos).astype(int), np.maximum(cells - 2, 0))
    frac = pos - base
    out = np.zeros((x.shape[0], flat.shape[-1]))
    for corner in range(2 ** grid.dim):
        bits = [(corner >> a) & 1 for a in range(grid.dim)]
        weight = np.ones(x.shape[0])
        index = []
        for a, bit in enumerate(bits):
            weight *= frac[:, a] if bit else 1.0 - frac[:, a]
            index.append(base[:, a] + bit)
        out += weight[:, None] * flat[tuple(index)]
    return out.reshape((x.shape[0],) + trailing)


def _coefficient(fn, t: float, x: np.ndarray, grid: Grid, table: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(fn(t, x), dtype=float)
    except SamplingError:
        return interpolate(grid, table, x)
    if not np.all(np.isfinite(out)):
        raise SamplingError(f"non-finite coefficient at t={t}")
    return out


def reflect(x: np.ndarray, lower, upper) -> tuple[np.ndarray, int]:
    """Mirror points back into the box; returns the new points and the number
    of coordinate exits."""
    lower = np.asarray(lower)
    upper = np.asarray(upper)
    outside = (x < lower) | (x > upper)
    exits = int(np.sum(outside))
    if exits:
        width = upper - lower
        # fold onto [0, 2 width) and mirror the upper half
        y = np.mod(x - lower, 2 * width)
        y = np.where(y > width, 2 * width - y, y)
        x = np.where(outside, lower + y, x)
    return x, exits


def simulate(problem, control, particles: int, seed: int = 0, substeps: int = 1,
             record=None, initial: np.ndarray | None = None) -> list[SdeEnsemble]:
    """Euler-Maruyama for dx = (f + g u) dt + sigma dw with reflecting walls.

    ``control`` holds ``u`` at every time node, shape ``(K+1,) + shape + (m,)``;
    on step k the feedback is the mean of nodes k and k+1, interpolated in
    space. ``record`` lists the node indices to snapshot (default: all).
    """
    grid = problem.grid
    K = grid.num_steps
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    u = np.asarray(getattr(control, "values", control), dtype=float)
    if u.shape[0] != K + 1:
        raise ValueError("control must be given at every time node")
    record = set(range(K + 1)) if record is None else set(int(k) for k in record)
    rng = make_rng(seed)
    x = sample_density(problem.rho0_field.values, grid, particles, rng) if initial is None \
        else np.array(initial, dtype=float).reshape(particles, grid.dim)
    exits = 0
    snaps = []
    if 0 in record:
        snaps.append(SdeEnsemble(particles, seed, x, 0, 0))
    delta = grid.dt / substeps
    times = grid.times()
    for k in range(K):
        u_step = 0.5 * (u[k] + u[k + 1])
        for j in range(substeps):
            t = float(times[k] + j * delta)
            co = problem.coefficients(t)
            f = _coefficient(problem.f, t, x, grid, co.f)
            g = _coefficient(problem.g, t, x, grid, co.g)
            sig = _coefficient(problem.sigma, t, x, grid, co.sigma)
            drift = f + np.einsum("nij,nj->ni", np.broadcast_to(g, (particles,) + g.shape[-2:]),
                                  interpolate(grid, u_step, x))
            xi = rng.standard_normal((particles, sig.shape[-1]))
            noise = np.einsum("nij,nj->ni", np.broadcast_to(sig, (particles,) + sig.shape[-2:]), xi)
            x, hits = reflect(x + drift * delta + np.sqrt(delta) * noise, grid.lower, grid.upper)
            exits += hits
        if k + 1 in record:
            snaps.append(SdeEnsemble(particles, seed, x, k + 1, exits))
    return snaps


def empirical_density(ensemble: SdeEnsemble, grid: Grid) -> ScalarField:
    """Histogram on the grid cells, normalized to unit mass."""
    pos = (ensemble.states - np.asarray(grid.lower)) / np.asarray(grid.h)
    idx = np.clip(np.floor(pos).astype(int), 0, np.asarray(grid.cells) - 1)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    counts = np.bincount(flat, minlength=grid.size).astype(float)
    return ScalarField(grid, counts / (ensemble.particle_count * grid.cell_volume),
                       grid.t0 + ensemble.time_index * grid.dt)


def checkpoints(grid: Grid) -> tuple[int, int, int]:
    return (0, grid.num_steps // 2, grid.num_steps)


def l1_distance(a: ScalarField, b: np.ndarray) -> float:
    return float(np.sum(np.abs(a.values - np.asarray(b).reshape(a.grid.shape))) * a.grid.cell_volume)


def checkpoint_errors(solution, problem, particles: int, seed: int = 0, substeps: int = 1,
                      control_scale: float = 1.0) -> dict[int, float]:
    """L1 distance between the histogram and rho_opt at t0, the middle node and t1."""
    grid = problem.grid
    nodes = checkpoints(grid)
    rho = solution.rho.normalized().values
    snaps = simulate(problem, control_scale * solution.u.values, particles, seed, substeps, record=nodes)
    return {s.time_index: l1_distance(empirical_density(s, grid), rho[s.time_index]) for s in snaps}


def crossvalidate(solution, problem, particles: int, seed: int = 0, substeps: int = 1,
                  control_scale: float = 1.0) -> float:
    """Max over the checkpoints of the histogram-vs-rho_opt L1 distance."""
    return max(checkpoint_errors(solution, problem, particles, seed, substeps, control_scale).values())


def export_ensemble_csv(path, ensemble: SdeEnsemble, grid: Grid) -> None:
    header = ["particle"] + coordinate_names(grid)
    rows = ([i] + [float(v) for v in row] for i, row in enumerate(ensemble.states))
    write_csv(path, header, rows)
