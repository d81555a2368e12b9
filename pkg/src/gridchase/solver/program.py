"""Problem container and result types for the conic solver."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from ..errors import DimensionMismatch


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SOC:
    """Second-order cone constraint ``||A x + b||_2 <= c @ x + d``."""

    A: NDArray[np.float64] | sp.spmatrix
    b: NDArray[np.float64]
    c: NDArray[np.float64]
    d: float

    @classmethod
    def ball(cls, num_vars: int, center: NDArray[np.float64], radius: float,
             index: Optional[NDArray[np.int64]] = None) -> "SOC":
        """``||x[index] - center|| <= radius`` (all variables by default)."""
        if index is None:
            index = np.arange(num_vars)
        A = sp.csr_matrix((np.ones(index.size), (np.arange(index.size), index)),
                          shape=(index.size, num_vars))
        return cls(A, -np.asarray(center, dtype=float), np.zeros(num_vars), float(radius))

    def violation(self, x: NDArray[np.float64]) -> float:
        return float(np.linalg.norm(self.A @ x + self.b) - (self.c @ x + self.d))


@dataclass(frozen=True)
class PSDBlock:
    """Variables ``x[start:start + n(n+1)/2]`` are the upper triangle of a
    symmetric ``n x n`` matrix that must be positive semidefinite."""

    start: int
    n: int

    @property
    def stop(self) -> int:
        return self.start + self.n * (self.n + 1) // 2


@dataclass
class ConicProgram:
    """minimize ``0.5 x'Px + q'x + const``

    subject to ``A_eq x = b_eq``, ``G x <= h``, every SOC constraint,
    ``lb <= x <= ub`` and, optionally, a PSD block.

    ``P`` may be a dense matrix, a 1-D array (diagonal) or ``None`` (zero).
    """

    num_vars: int
    q: NDArray[np.float64]
    P: Optional[NDArray[np.float64]] = None
    const: float = 0.0
    A_eq: Optional[NDArray[np.float64]] = None
    b_eq: Optional[NDArray[np.float64]] = None
    G: Optional[NDArray[np.float64] | sp.spmatrix] = None
    h: Optional[NDArray[np.float64]] = None
    socs: list[SOC] = field(default_factory=list)
    lb: Optional[NDArray[np.float64]] = None
    ub: Optional[NDArray[np.float64]] = None
    psd: Optional[PSDBlock] = None

    def __post_init__(self):
        nv = self.num_vars
        self.q = np.asarray(self.q, dtype=float)
        if self.q.shape != (nv,):
            raise DimensionMismatch(f"q has shape {self.q.shape}, expected ({nv},)")
        if self.P is not None:
            self.P = np.asarray(self.P, dtype=float)
            if self.P.ndim == 1:
                if self.P.shape != (nv,) or (self.P < 0).any():
                    raise ValueError("diagonal P must be nonnegative with length num_vars")
            else:
                if self.P.shape != (nv, nv):
                    raise DimensionMismatch(f"P has shape {self.P.shape}")
                if not np.allclose(self.P, self.P.T, atol=1e-10 * max(1.0, np.abs(self.P).max())):
                    raise ValueError("P must be symmetric")
                scale = max(1.0, float(np.abs(self.P).max()))
                if np.linalg.eigvalsh(self.P).min() < -1e-9 * scale:
                    raise ValueError("P must be positive semidefinite")
        for name, M, v in (("A_eq", self.A_eq, self.b_eq), ("G", self.G, self.h)):
            if (M is None) != (v is None):
                raise DimensionMismatch(f"{name} and its right-hand side must be given together")
            if M is not None:
                if M.ndim != 2 or M.shape[1] != nv or M.shape[0] != np.asarray(v).size:
                    raise DimensionMismatch(f"{name} has shape {M.shape}")
        if self.h is not None:
            self.h = np.asarray(self.h, dtype=float)
        if self.b_eq is not None:
            self.b_eq = np.asarray(self.b_eq, dtype=float)
        for soc in self.socs:
            if soc.A.shape[1] != nv or soc.c.shape != (nv,) or soc.A.shape[0] != soc.b.size:
                raise DimensionMismatch("SOC constraint dimensions do not match num_vars")
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (nv,):
                    raise DimensionMismatch(f"{name} has shape {v.shape}")
                setattr(self, name, v)
        if self.psd is not None and self.psd.stop > nv:
            raise DimensionMismatch("PSD block exceeds the variable vector")

    def objective(self, x: NDArray[np.float64]) -> float:
        val = float(self.q @ x) + self.const
        if self.P is not None:
            Px = self.P * x if self.P.ndim == 1 else self.P @ x
            val += 0.5 * float(x @ Px)
        return val

    def gradient(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        g = self.q.copy()
        if self.P is not None:
            g += self.P * x if self.P.ndim == 1 else self.P @ x
        return g


@dataclass
class SolverReport:
    status: Status
    x: Optional[NDArray[np.float64]]
    objective: float
    max_residual: float
    iterations: int
    wall_time: float
    duals: dict = field(default_factory=dict)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def stats(self) -> dict:
        return {
            "status": self.status.value,
            "objective": self.objective,
            "residual": self.max_residual,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
        }
