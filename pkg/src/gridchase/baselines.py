"""Reference controllers behind a single step interface.

``NoControl`` never acts. ``PerfectModel`` runs the robust controller with
the true sensitivity matrix and ``PiFixed`` with the initial estimate, never
updated. ``PiPlusSel`` runs the same controller on whatever estimate the
episode loop last stored in the policy. ``Droop`` is a local integral droop
rule; it is a simple stand-in for model-agnostic decentralized controllers,
not a port of any particular published law.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionMismatch, DomainError
from .oracle import Mode, OracleSolution, SafetyEnvelope, solve_oracle

DROOP_SCALE = 0.05


class Kind(str, enum.Enum):
    PI_PLUS_SEL = "PiPlusSel"
    PI_FIXED = "PiFixed"
    NO_CONTROL = "NoControl"
    PERFECT_MODEL = "PerfectModel"
    DROOP = "Droop"

    @property
    def uses_oracle(self) -> bool:
        return self in (Kind.PI_PLUS_SEL, Kind.PI_FIXED, Kind.PERFECT_MODEL)


def droop_gains(env: SafetyEnvelope, scale: float = DROOP_SCALE) -> NDArray[np.float64]:
    """``kappa_i = scale (q_hi_i - q_lo_i) / (v_hi_i - v_lo_i)``."""
    if scale < 0:
        raise DomainError("droop scale must be nonnegative")
    return scale * (env.q_hi - env.q_lo) / (env.v_hi - env.v_lo)


@dataclass
class Policy:
    kind: Kind
    X_hat: NDArray[np.float64] | None = None
    gains: NDArray[np.float64] | None = None
    mode: Mode = Mode.TWO_STAGE
    last: OracleSolution | None = field(default=None, repr=False)


def make_policy(kind: Kind | str, env: SafetyEnvelope, X_star=None, X_init=None, gains=None,
                mode: Mode | str = Mode.TWO_STAGE) -> Policy:
    kind = Kind(kind)
    mode = Mode(mode)
    if kind is Kind.PERFECT_MODEL:
        if X_star is None:
            raise DomainError("PerfectModel needs the true sensitivity matrix")
        return Policy(kind, np.array(X_star, dtype=float), mode=mode)
    if kind in (Kind.PI_FIXED, Kind.PI_PLUS_SEL):
        if X_init is None:
            raise DomainError(f"{kind.value} needs an initial estimate")
        return Policy(kind, np.array(X_init, dtype=float), mode=mode)
    if kind is Kind.DROOP:
        g = droop_gains(env) if gains is None else np.asarray(gains, dtype=float)
        if g.shape != (env.n,):
            raise DimensionMismatch(f"droop gains must have length {env.n}")
        return Policy(kind, gains=g, mode=mode)
    return Policy(kind, mode=mode)


def policy_step(policy: Policy, v_now, qc_prev, env: SafetyEnvelope) -> NDArray[np.float64]:
    """Action ``u`` for the current state; ``qc_prev + u`` stays within the
    reactive power limits."""
    v = np.asarray(v_now, dtype=float)
    qc = np.asarray(qc_prev, dtype=float)
    if v.shape != (env.n,) or qc.shape != (env.n,):
        raise DimensionMismatch("state size differs from the envelope")
    kind = policy.kind
    if kind is Kind.NO_CONTROL:
        policy.last = None
        return np.zeros(env.n)
    if kind is Kind.DROOP:
        target = np.clip(qc - policy.gains * (v - env.v_nom), env.q_lo, env.q_hi)
        policy.last = None
        return target - qc
    sol = solve_oracle(policy.X_hat, v, qc, env, policy.mode)
    policy.last = sol
    return sol.u
