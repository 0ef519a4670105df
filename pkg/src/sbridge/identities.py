"""Refinement battery for the product rule of the weighted Laplacian.

Each case is an analytic triple (alpha, beta, Sigma) on the box [-1, 1]^n.
At every resolution the conservative discrete operator is compared with its
product-rule expansion; halving h should divide the gap by about four.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Grid, MatrixField, ScalarField
from .operators import OperatorWorkspace, lemma1_residual, lemma1_special_residuals

RESOLUTIONS = (64, 128, 256)
RATIO_BAND = (3.5, 4.5)


@dataclass(frozen=True)
class IdentityCase:
    name: str
    dim: int
    alpha: Callable
    beta: Callable
    Sigma: Callable


def _scalar_tensor(fn):
    return lambda x: fn(x)[..., None, None]


def _tensor2(s11, s12, s22):
    def fn(x):
        a, b, c = s11(x), s12(x), s22(x)
        return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    return fn


def _x(p):
    return p[..., 0]


def _y(p):
    return p[..., 1]


CASES = (
    IdentityCase("polynomial-1d", 1,
                 lambda p: 1 + _x(p) ** 2,
                 lambda p: 2 + _x(p) - 0.3 * _x(p) ** 3,
                 _scalar_tensor(lambda p: 1 + 0.5 * _x(p) ** 2)),
    IdentityCase("trigonometric-1d", 1,
                 lambda p: 2 + np.sin(np.pi * _x(p)),
                 lambda p: 2 + np.cos(2 * _x(p)),
                 _scalar_tensor(lambda p: 1.5 + 0.5 * np.sin(_x(p)))),
    IdentityCase("gaussian-1d", 1,
                 lambda p: np.exp(-_x(p) ** 2),
                 lambda p: np.exp(-0.5 * (_x(p) - 0.3) ** 2),
                 _scalar_tensor(lambda p: 1 + 0.25 * np.exp(-_x(p) ** 2))),
    IdentityCase("polynomial-2d", 2,
                 lambda p: 1 + _x(p) ** 2 + _y(p) ** 2,
                 lambda p: 1 + _x(p) * _y(p) + 0.5 * _y(p) ** 3 + 0.2 * _x(p) ** 4,
                 _tensor2(lambda p: 1 + _x(p) ** 2, lambda p: 0.2 + 0.1 * _x(p) * _y(p),
                          lambda p: 1 + _y(p) ** 2)),
    IdentityCase("gaussian-trigonometric-2d", 2,
                 lambda p: np.exp(-(_x(p) ** 2 + _y(p) ** 2)),
                 lambda p: 2 + np.sin(_x(p)) * np.cos(_y(p)),
                 _tensor2(lambda p: np.full(p.shape[:-1], 2.0), lambda p: 0.5 * np.sin(_x(p) + _y(p)),
                          lambda p: np.full(p.shape[:-1], 1.5))),
)


def case_residuals(case: IdentityCase, cells: int) -> tuple[float, float, float]:
    """(general, beta = 1, Sigma = I) residuals at ``cells`` per axis."""
    grid = Grid((-1.0,) * case.dim, (1.0,) * case.dim, (cells,) * case.dim)
    pts = grid.points()
    ws = OperatorWorkspace(grid)
    alpha = ScalarField(grid, case.alpha(pts))
    beta = ScalarField(grid, case.beta(pts))
    Sigma = MatrixField(grid, case.Sigma(pts))
    general = lemma1_residual(alpha, beta, Sigma, ws)
    single, plain = lemma1_special_residuals(alpha, beta, Sigma, ws)
    return general, single, plain


@dataclass(frozen=True)
class BatteryRow:
    case: str
    variant: str
    residuals: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        r = self.residuals
        return tuple(a / b for a, b in zip(r[:-1], r[1:]))

    @property
    def passed(self) -> bool:
        lo, hi = RATIO_BAND
        return all(lo <= q <= hi for q in self.ratios)


def run_battery(cases=CASES, resolutions=RESOLUTIONS) -> list[BatteryRow]:
    rows = []
    for case in cases:
        table = np.array([case_residuals(case, n) for n in resolutions])
        for j, variant in enumerate(("general", "beta=1", "Sigma=I")):
            rows.append(BatteryRow(case.name, variant, tuple(float(v) for v in table[:, j])))
    return rows


def format_table(rows: list[BatteryRow], resolutions=RESOLUTIONS) -> list[str]:
    head = f"{'case':<28}{'variant':<10}" + "".join(f"{'n=' + str(n):>13}" for n in resolutions) \
        + "".join(f"{'ratio':>8}" for _ in resolutions[1:]) + "  status"
    lines = [head]
    for row in rows:
        cells = "".join(f"{v:13.4e}" for v in row.residuals)
        ratios = "".join(f"{q:8.3f}" for q in row.ratios)
        lines.append(f"{row.case:<28}{row.variant:<10}{cells}{ratios}  {'ok' if row.passed else 'FAIL'}")
    return lines
