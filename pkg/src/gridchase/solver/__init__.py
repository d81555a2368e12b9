"""Interior-point solver for convex quadratic second-order cone programs."""

from .ipm import kkt_residuals, primal_residual, solve
from .program import SOC, ConicProgram, PSDBlock, SolverReport, Status

__all__ = [
    "SOC",
    "ConicProgram",
    "PSDBlock",
    "SolverReport",
    "Status",
    "kkt_residuals",
    "primal_residual",
    "solve",
]
