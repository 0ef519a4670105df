import numpy as np
import pytest

from sbridge.fixedpoint import sinkhorn_linear
from sbridge.grid import Grid
from sbridge.problem import classical_problem
from sbridge.recovery import build_solution

BOX = (-8.0, 8.0)


def classical_grid(cells=256, steps=200):
    return Grid((BOX[0],), (BOX[1],), (cells,), 0.0, 1.0, steps)


@pytest.fixture(scope="session")
def classical():
    """Converged classical bridge at 256 cells / 200 steps."""
    problem = classical_problem(classical_grid())
    report = sinkhorn_linear(problem, keep_iterates=True)
    solution = build_solution(report, problem)
    return problem, report, solution


@pytest.fixture(scope="session")
def classical_coarse():
    problem = classical_problem(classical_grid(128, 100))
    report = sinkhorn_linear(problem)
    return problem, report, build_solution(report, problem)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
