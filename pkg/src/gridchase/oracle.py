"""Robust one-step voltage controller.

Given a model estimate ``X_hat`` the controller picks the change ``u`` in
controllable reactive injection that keeps the predicted voltage inside the
limits shrunk by ``k = eta + rho ||u||``. The shrinkage covers any noise of
size ``eta`` and any model within triangle distance ``rho`` of ``X_hat``,
because ``|(D u)_i| <= ||D||_tri ||u||`` for every symmetric ``D``.

The second-order cone program uses an epigraph variable ``s >= ||u||``::

    minimize    ||v + X u - v_nom||^2_Pv + ||u||^2_Pu (+ beta xi^2)
    subject to  rho s - (X u)_i - xi <= v_i - v_lo_i - eta
                rho s + (X u)_i - xi <= v_hi_i - v_i - eta
                q_lo - qc <= u <= q_hi - qc,  ||u|| <= s,  xi >= 0

The strict variant fixes ``xi = 0``.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from numpy.typing import NDArray

from .errors import DegenerateRange, DimensionMismatch, DomainError, SlackStageInfeasible, SolverFailure
from .grid import check_symmetric, triangle_norm
from .solver import SOC, ConicProgram, SolverReport, Status, solve

log = logging.getLogger(__name__)

ORACLE_TOL = 1e-7
CHECK_TOL = 1e-6
RELAX_STEPS = 2

# operating point used throughout the case study: 12 kV substation
V_NOMINAL = 144.0  # kV^2
Q_LIMIT = 0.24  # MVar


class Mode(str, enum.Enum):
    TWO_STAGE = "TwoStage"
    SLACK_ONLY = "SlackOnly"


class Stage(str, enum.Enum):
    STRICT = "Strict"
    SLACK = "Slack"


def rho(epsilon: float, q_lo, q_hi) -> float:
    """Robustness margin ``epsilon / (2 ||q_hi - q_lo||)``."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    width = np.asarray(q_hi, dtype=float) - np.asarray(q_lo, dtype=float)
    if (width < 0).any():
        raise DomainError("q_hi must dominate q_lo")
    norm = float(np.linalg.norm(width))
    if norm == 0.0:
        raise DegenerateRange("reactive power range is empty at every bus")
    return epsilon / (2.0 * norm)


@dataclass(frozen=True)
class SafetyEnvelope:
    v_lo: NDArray[np.float64]
    v_hi: NDArray[np.float64]
    v_nom: NDArray[np.float64]
    q_lo: NDArray[np.float64]
    q_hi: NDArray[np.float64]
    eta: float
    epsilon: float
    beta: float
    Pv: NDArray[np.float64]
    Pu: NDArray[np.float64]
    v0: float = V_NOMINAL

    def __post_init__(self):
        n = self.v_lo.size
        for name in ("v_hi", "v_nom", "q_lo", "q_hi"):
            if getattr(self, name).shape != (n,):
                raise DimensionMismatch(f"{name} must have length {n}")
        for name in ("Pv", "Pu"):
            M = check_symmetric(getattr(self, name))
            if M.shape != (n, n):
                raise DimensionMismatch(f"{name} must be {n} x {n}")
            if np.linalg.eigvalsh(M)[0] < -1e-12 * max(1.0, np.abs(M).max()):
                raise DomainError(f"{name} must be positive semidefinite")
        if not (self.v_lo < self.v_hi).all():
            raise DomainError("v_lo must be strictly below v_hi")
        if not (self.q_lo <= self.q_hi).all():
            raise DomainError("q_lo must not exceed q_hi")
        if self.eta < 0 or self.eta > float(np.min(self.v_hi - self.v_lo)) / 2.0:
            raise DomainError("eta must lie in [0, half the narrowest voltage band]")
        if not self.beta > 0:
            raise DomainError("beta must be positive")

    @classmethod
    def standard(cls, n: int, eta: float, controllable=None, epsilon: float = 0.1, beta: float = 100.0,
                 v_nom: float = V_NOMINAL, band: float = 0.05, q_limit: float = Q_LIMIT,
                 pv: float = 0.1, pu: float = 10.0) -> "SafetyEnvelope":
        """Uniform envelope: limits ``[(1-band)^2, (1+band)^2] v_nom`` and
        ``+-q_limit`` on controllable buses (all buses by default)."""
        mask = np.ones(n, dtype=bool) if controllable is None else np.asarray(controllable, dtype=bool)
        ones = np.ones(n)
        return cls(
            v_lo=(1 - band) ** 2 * v_nom * ones,
            v_hi=(1 + band) ** 2 * v_nom * ones,
            v_nom=v_nom * ones,
            q_lo=np.where(mask, -q_limit, 0.0),
            q_hi=np.where(mask, q_limit, 0.0),
            eta=eta,
            epsilon=epsilon,
            beta=beta,
            Pv=pv * np.eye(n),
            Pu=pu * np.eye(n),
            v0=v_nom,
        )

    @property
    def n(self) -> int:
        return self.v_lo.size

    @property
    def controllable(self) -> NDArray[np.bool_]:
        return self.q_hi > self.q_lo

    @property
    def rho(self) -> float:
        return rho(self.epsilon, self.q_lo, self.q_hi)


@dataclass
class OracleSolution:
    u: NDArray[np.float64]
    xi: float
    k: float
    predicted_v: NDArray[np.float64]
    stage: Stage
    report: SolverReport | None
    objective: float
    v_now: NDArray[np.float64]


def _program(X, v, qc_prev, env: SafetyEnvelope, r: float, with_slack: bool):
    C = np.flatnonzero(env.controllable)
    c = C.size
    n = env.n
    XC = X[:, C]
    nv = c + with_slack + 1
    js = nv - 1
    dv = v - env.v_nom
    P = np.zeros((nv, nv))
    P[:c, :c] = 2.0 * (XC.T @ env.Pv @ XC + env.Pu[np.ix_(C, C)])
    q = np.zeros(nv)
    q[:c] = 2.0 * XC.T @ env.Pv @ dv
    if with_slack:
        P[c, c] = 2.0 * env.beta
    G = np.zeros((2 * n, nv))
    G[:n, :c] = -XC
    G[n:, :c] = XC
    G[:, js] = r
    if with_slack:
        G[:, c] = -1.0
    h = np.concatenate([v - env.v_lo - env.eta, env.v_hi - v - env.eta])
    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[:c] = env.q_lo[C] - qc_prev[C]
    ub[:c] = env.q_hi[C] - qc_prev[C]
    if with_slack:
        lb[c] = 0.0
    A = sp.csr_matrix((np.ones(c), (np.arange(c), np.arange(c))), shape=(c, nv))
    cvec = np.zeros(nv)
    cvec[js] = 1.0
    soc = SOC(A, np.zeros(c), cvec, 0.0)
    const = float(dv @ env.Pv @ dv)
    return ConicProgram(nv, q, P=P, const=const, G=G, h=h, socs=[soc], lb=lb, ub=ub), C


def _finish(X, v, qc_prev, env, r, C, x, with_slack, stage, rep) -> OracleSolution:
    n = env.n
    u = np.zeros(n)
    c = C.size
    # the interior point iterate is strictly inside the bounds; clip rounding
    u[C] = np.clip(x[:c], env.q_lo[C] - qc_prev[C], env.q_hi[C] - qc_prev[C])
    xi = max(float(x[c]), 0.0) if with_slack else 0.0
    pred = v + X @ u
    d = pred - env.v_nom
    obj = float(d @ env.Pv @ d + u @ env.Pu @ u + (env.beta * xi * xi if with_slack else 0.0))
    k = env.eta + r * float(np.linalg.norm(u))
    if k - xi < 0:
        log.info("slack %.4g exceeds the buffer %.4g; limits are widened", xi, k)
    return OracleSolution(u, xi, k, pred, stage, rep, obj, np.asarray(v, dtype=float).copy())


def _unconstrained(X, v, qc_prev, env: SafetyEnvelope, r: float) -> OracleSolution | None:
    """The strict problem is convex, so its unconstrained minimizer is the
    optimum whenever it happens to satisfy every constraint."""
    t0 = time.perf_counter()
    C = np.flatnonzero(env.controllable)
    if C.size == 0:
        return None
    XC = X[:, C]
    H = XC.T @ env.Pv @ XC + env.Pu[np.ix_(C, C)]
    g = XC.T @ env.Pv @ (v - env.v_nom)
    try:
        uc = -la.cho_solve(la.cho_factor(H, check_finite=False), g, check_finite=False)
    except la.LinAlgError:
        return None
    lo = env.q_lo[C] - qc_prev[C]
    hi = env.q_hi[C] - qc_prev[C]
    if (uc < lo).any() or (uc > hi).any():
        return None
    pred = v + XC @ uc
    k = env.eta + r * float(np.linalg.norm(uc))
    if (pred < env.v_lo + k).any() or (pred > env.v_hi - k).any():
        return None
    x = np.concatenate([uc, [np.linalg.norm(uc)]])
    rep = SolverReport(Status.OPTIMAL, x, np.nan, 0.0, 0, time.perf_counter() - t0,
                       message="unconstrained minimizer is feasible")
    sol = _finish(X, v, qc_prev, env, r, C, x, False, Stage.STRICT, rep)
    rep.objective = sol.objective
    return sol


def verify_solution(sol: OracleSolution, X, qc_prev, env: SafetyEnvelope, tol: float = CHECK_TOL) -> None:
    """Arithmetic re-check of the solution invariants; raises SolverFailure."""
    qc = qc_prev + sol.u
    if (qc < env.q_lo - tol).any() or (qc > env.q_hi + tol).any():
        raise SolverFailure("oracle action leaves the reactive power range")
    if not np.allclose(sol.predicted_v, sol.v_now + X @ sol.u, rtol=0, atol=1e-9):
        raise SolverFailure("predicted voltage is inconsistent with the action")
    if sol.stage is Stage.STRICT:
        if sol.xi != 0.0:
            raise SolverFailure("strict solution carries slack")
        lo = env.v_lo + sol.k
        hi = env.v_hi - sol.k
        if (sol.predicted_v < lo - tol).any() or (sol.predicted_v > hi + tol).any():
            raise SolverFailure("strict solution violates the robust band")


def _solve_relaxing(prog: ConicProgram, tol: float) -> SolverReport:
    """Solve, loosening the tolerance up to RELAX_STEPS times by 10x when
    the solver stalls on a conditioning floor. The solution is re-checked
    by :func:`verify_solution` afterwards in any case."""
    rep = solve(prog, tol=tol)
    for _ in range(RELAX_STEPS):
        if rep.ok or rep.status is Status.INFEASIBLE:
            break
        tol *= 10.0
        log.info("oracle solve ended with %s; retrying at tolerance %.0e", rep.status.value, tol)
        rep = solve(prog, tol=tol)
    return rep


def solve_oracle(X_hat, v_now, qc_prev, env: SafetyEnvelope, mode: Mode | str = Mode.TWO_STAGE,
                 tol: float = ORACLE_TOL, verify: bool = True) -> OracleSolution:
    """Robust action for the current state.

    ``TwoStage`` first solves without slack and falls back to the slack
    problem only when that is infeasible. ``SlackOnly`` solves the slack
    problem directly.
    """
    mode = Mode(mode)
    X = check_symmetric(X_hat)
    v = np.asarray(v_now, dtype=float)
    qc_prev = np.asarray(qc_prev, dtype=float)
    if X.shape != (env.n, env.n) or v.shape != (env.n,) or qc_prev.shape != (env.n,):
        raise DimensionMismatch("model, state and envelope sizes differ")
    r = env.rho
    sol = None
    if mode is Mode.TWO_STAGE:
        sol = _unconstrained(X, v, qc_prev, env, r)
    if sol is None and mode is Mode.TWO_STAGE:
        prog, C = _program(X, v, qc_prev, env, r, with_slack=False)
        rep = _solve_relaxing(prog, tol)
        if rep.ok:
            sol = _finish(X, v, qc_prev, env, r, C, rep.x, False, Stage.STRICT, rep)
        elif rep.status is not Status.INFEASIBLE:
            log.warning("strict stage ended with %s (%s); using the slack stage",
                        rep.status.value, rep.message)
    if sol is None:
        prog, C = _program(X, v, qc_prev, env, r, with_slack=True)
        rep = _solve_relaxing(prog, tol)
        if rep.status is Status.INFEASIBLE:
            raise SlackStageInfeasible("slack problem reported infeasible; u = 0 should always be feasible")
        if not rep.ok:
            raise SolverFailure(f"oracle solve failed: {rep.status.value} ({rep.message})")
        sol = _finish(X, v, qc_prev, env, r, C, rep.x, True, Stage.SLACK, rep)
    if verify:
        verify_solution(sol, X, qc_prev, env)
    return sol


@dataclass(frozen=True)
class CertificateReport:
    violations: int
    n_samples: int
    worst_excess: float


def _sample_perturbation(n: int, radius: float, rng: np.random.Generator, on_boundary: bool):
    D = rng.normal(size=(n, n))
    D = (D + D.T) / 2.0
    scale = radius if on_boundary else radius * rng.random() ** (1.0 / (n * (n + 1) / 2))
    return D * (scale / triangle_norm(D))


def robustness_certificate(X_hat, sol: OracleSolution, env: SafetyEnvelope, n_mc: int = 1000, seed: int = 0,
                           radius: float | None = None, tol: float = CHECK_TOL) -> CertificateReport:
    """Monte Carlo check that the action is safe for nearby models and noise.

    Models are drawn from the triangle-norm ball of radius ``rho`` (or
    ``radius``) around ``X_hat``, half of them on the boundary, with negative
    entries clipped to zero (which keeps them in the ball). Noise vectors
    include the two constant extremes ``+-eta`` and random sign patterns.
    """
    if sol.stage is not Stage.STRICT:
        raise DomainError("certificates apply to strict solutions only")
    rng = np.random.default_rng(seed)
    X_hat = np.asarray(X_hat, dtype=float)
    n = env.n
    r = env.rho if radius is None else radius
    worst = -np.inf
    bad = 0
    for j in range(n_mc):
        X = X_hat + _sample_perturbation(n, r, rng, on_boundary=j % 2 == 0)
        X = np.maximum(X, 0.0)
        if j % 4 == 0:
            w = env.eta * np.ones(n)
        elif j % 4 == 1:
            w = -env.eta * np.ones(n)
        elif j % 4 == 2:
            w = env.eta * np.where(rng.random(n) < 0.5, -1.0, 1.0)
        else:
            w = rng.uniform(-env.eta, env.eta, n)
        v_next = sol.v_now + X @ sol.u + w
        excess = float(max((env.v_lo - v_next).max(), (v_next - env.v_hi).max()))
        worst = max(worst, excess)
        if excess > tol:
            bad += 1
    return CertificateReport(bad, n_mc, worst)
