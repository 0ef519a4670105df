"""Finite-difference Schrödinger bridge solver with factor PDEs, endpoint recursion and checks."""

__version__ = "0.1.0"

from .fixedpoint import SolveReport, hilbert_distance, sinkhorn_generalized, sinkhorn_linear
from .grid import Grid, MatrixField, ScalarField, VectorField
from .integrators import StepScheme
from .problem import BridgeProblem, classical_problem, validate
from .recovery import BridgeSolution, build_solution

__all__ = [
    "BridgeProblem",
    "BridgeSolution",
    "Grid",
    "MatrixField",
    "ScalarField",
    "SolveReport",
    "StepScheme",
    "VectorField",
    "build_solution",
    "classical_problem",
    "hilbert_distance",
    "sinkhorn_generalized",
    "sinkhorn_linear",
    "validate",
]
