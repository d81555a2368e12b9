"""Injection time series, exogenous voltages and assumption checks.

Profiles are stored in SI units (W, var). Voltage arithmetic uses squared
kV with impedances in ohm, so injections are converted to MW/MVar when the
exogenous voltage ``v_par = R p + X q_e + v0`` is formed.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.optimize as opt
from numpy.typing import NDArray

from .errors import DimensionMismatch, DomainError, NonFiniteValue, SchemaError, SolverFailure
from .grid import SensitivityModel

PROFILE_HEADER = ("t", "bus", "p_w", "q_e_var")
SI_TO_MEGA = 1e-6


@dataclass(frozen=True)
class InjectionProfile:
    dt: float
    p: NDArray[np.float64]  # T x n, W
    q_e: NDArray[np.float64]  # T x n, var

    def __post_init__(self):
        if self.p.shape != self.q_e.shape or self.p.ndim != 2:
            raise DimensionMismatch(f"p {self.p.shape} and q_e {self.q_e.shape} must be equal T x n")
        if self.p.shape[0] < 2:
            raise DomainError("a profile needs at least two steps")
        if not (np.isfinite(self.p).all() and np.isfinite(self.q_e).all()):
            raise NonFiniteValue("profile contains non-finite values")

    @property
    def T(self) -> int:
        return self.p.shape[0]

    @property
    def n(self) -> int:
        return self.p.shape[1]


def load_profile(path: str | Path, dt: float = 6.0) -> InjectionProfile:
    """Read a long-format CSV with header ``t,bus,p_w,q_e_var``.

    Steps are numbered from 0 and buses from 1; every (t, bus) pair must
    appear exactly once.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PROFILE_HEADER:
            raise SchemaError(f"expected header {','.join(PROFILE_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise SchemaError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                t, bus = int(row[0]), int(row[1])
                p, q = float(row[2]), float(row[3])
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
            if not (np.isfinite(p) and np.isfinite(q)):
                raise NonFiniteValue(f"line {lineno}: non-finite injection")
            rows.append((t, bus, p, q))
    if not rows:
        raise SchemaError("profile has no data rows")
    data = np.array(rows)
    ts = data[:, 0].astype(int)
    buses = data[:, 1].astype(int)
    T, n = ts.max() + 1, buses.max()
    if ts.min() < 0 or buses.min() < 1:
        raise SchemaError("steps start at 0 and buses at 1")
    if len(rows) != T * n:
        raise SchemaError(f"expected {T * n} rows for {T} steps x {n} buses, got {len(rows)}")
    seen = np.zeros((T, n), dtype=bool)
    seen[ts, buses - 1] = True
    if not seen.all():
        raise SchemaError("duplicate or missing (t, bus) entries")
    p = np.empty((T, n))
    q = np.empty((T, n))
    p[ts, buses - 1] = data[:, 2]
    q[ts, buses - 1] = data[:, 3]
    return InjectionProfile(dt, p, q)


def save_profile(profile: InjectionProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for t in range(profile.T):
            for i in range(profile.n):
                w.writerow([t, i + 1, format(profile.p[t, i], ".17g"), format(profile.q_e[t, i], ".17g")])


def synth_profile(
    n: int,
    T: int,
    dt: float = 6.0,
    smoothness: float = 1.0,
    pv_buses=(),
    pv_peak: float = 2.5e5,
    seed: int = 0,
    start_hour: float = 5.0,
    load_range: tuple[float, float] = (3e4, 9e4),
    cloud_rate: float = 0.0,
    cloud_depth: float = 0.0,
) -> InjectionProfile:
    """Synthetic load plus PV injections.

    Each bus draws a constant load; ``smoothness`` scales every time-varying
    part (daily load shape, slow per-bus fluctuation, PV generation), so
    ``smoothness=0`` gives a constant profile and the step-to-step changes
    grow linearly with it. PV buses get a bell-shaped midday bump of height
    ``pv_peak`` watts. Reactive load follows active load at power factor
    about 0.96.

    Passing clouds are a two-state chain shared by all PV buses: each step
    the sky flips between clear and shaded with probability ``cloud_rate``,
    and shade scales PV output by ``1 - cloud_depth``.
    """
    if T < 2:
        raise DomainError("T must be at least 2")
    if n < 1:
        raise DomainError("n must be at least 1")
    if not (0.0 <= cloud_rate <= 1.0 and 0.0 <= cloud_depth <= 1.0):
        raise DomainError("cloud_rate and cloud_depth must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    base = rng.uniform(*load_range, size=n)
    hours = (start_hour + np.arange(T) * dt / 3600.0) % 24.0
    # evening peak on top of a daytime plateau
    shape = 0.15 * np.exp(-(((hours - 19.0) / 2.5) ** 2)) - 0.2 * np.exp(-(((hours - 3.0) / 3.0) ** 2))
    # slow fluctuation: smoothed random walk, roughly 5% of base
    steps = rng.normal(size=(T, n))
    kernel = np.hanning(min(31, T - 1 + T % 2))
    kernel /= kernel.sum()
    walk = np.cumsum(steps, axis=0)
    walk = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, walk)
    walk -= walk[0]
    walk *= 0.05 / max(1.0, np.abs(walk).max())
    load = base * (1.0 + smoothness * (shape[:, None] - shape[0] + walk))
    pv_gen = np.clip(np.exp(-(((hours - 12.5) / 2.7) ** 2)) - np.exp(-((5.5 / 2.7) ** 2)), 0.0, None)
    shade = np.ones(T)
    if cloud_rate > 0 and cloud_depth > 0:
        # separate stream so the cloud settings leave the load draws alone
        crng = np.random.default_rng([seed, 1])
        flips = np.cumsum(crng.random(T) < cloud_rate) % 2
        flips[0] = 0
        shade = 1.0 - cloud_depth * flips
    pv = np.zeros((T, n))
    for b in pv_buses:
        pv[:, b - 1] = pv_peak * (pv_gen * shade - pv_gen[0])
    p = -load + smoothness * pv
    q_e = -0.3 * load
    return InjectionProfile(dt, p, q_e)


@dataclass(frozen=True)
class ExogenousTrace:
    v_par: NDArray[np.float64]  # T x n
    w: NDArray[np.float64]  # (T-1) x n

    @property
    def eta_hat(self) -> float:
        return float(np.abs(self.w).max(initial=0.0))


def compute_trace(model: SensitivityModel, profile: InjectionProfile, v0: float) -> ExogenousTrace:
    """``v_par(t) = R p(t) + X q_e(t) + v0`` and ``w(t) = v_par(t+1) - v_par(t)``."""
    if model.n != profile.n:
        raise DimensionMismatch(f"model has {model.n} buses, profile has {profile.n}")
    v_par = SI_TO_MEGA * (profile.p @ model.R + profile.q_e @ model.X) + v0
    return ExogenousTrace(v_par, np.diff(v_par, axis=0))


@dataclass(frozen=True)
class VparBox:
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]

    def __post_init__(self):
        if self.lo.shape != self.hi.shape:
            raise DimensionMismatch("box bounds differ in shape")
        if (self.lo > self.hi).any():
            raise DomainError("box has lo > hi")

    def contains(self, v: NDArray[np.float64], tol: float = 0.0) -> bool:
        return bool(((v >= self.lo - tol) & (v <= self.hi + tol)).all())

    def corner(self, signs: NDArray[np.bool_]) -> NDArray[np.float64]:
        return np.where(signs, self.hi, self.lo)


def vpar_box(trace: ExogenousTrace, inflation: float = 0.0) -> VparBox:
    if inflation < 0:
        raise DomainError("inflation must be nonnegative")
    return VparBox(trace.v_par.min(axis=0) - inflation, trace.v_par.max(axis=0) + inflation)


@dataclass(frozen=True)
class Assumption1Report:
    ok: bool
    worst: float
    argmax_t: int
    reason: str = ""


def check_assumption1(trace: ExogenousTrace, eta: float, v_lo=None, v_hi=None) -> Assumption1Report:
    """The noise bound ``eta`` must cover every step change and may not
    exceed half the narrowest voltage band."""
    if trace.w.size:
        flat = np.abs(trace.w).max(axis=1)
        t = int(np.argmax(flat))
        worst = float(flat[t])
    else:
        t, worst = 0, 0.0
    if v_lo is not None and v_hi is not None:
        cap = float(np.min(np.asarray(v_hi) - np.asarray(v_lo))) / 2.0
        if eta > cap:
            return Assumption1Report(False, worst, t, "eta_exceeds_halfwidth")
    if worst > eta:
        return Assumption1Report(False, worst, t, "noise_exceeds_eta")
    return Assumption1Report(True, worst, t)


@dataclass(frozen=True)
class Assumption3Report:
    feasible_fraction: float
    n_checked: int
    failures: tuple[tuple[int, int], ...]  # (X sample, v_par sample) pairs


def _vpar_samples(box: VparBox, n_mc: int, rng: np.random.Generator) -> NDArray[np.float64]:
    n = box.lo.size
    if 2**n <= n_mc:
        signs = np.array(list(itertools.product([False, True], repeat=n)), dtype=bool)
        return np.array([box.corner(s) for s in signs])
    out = [box.lo, box.hi]
    while len(out) < n_mc:
        out.append(box.corner(rng.random(n) < 0.5))
    return np.array(out[:n_mc])


def reachable(X: NDArray[np.float64], v_par, q_lo, q_hi, lo, hi) -> bool:
    """Is there ``q`` in ``[q_lo, q_hi]`` with ``lo <= X q + v_par <= hi``?"""
    A = np.vstack([X, -X])
    b = np.concatenate([hi - v_par, v_par - lo])
    res = opt.linprog(np.zeros(X.shape[1]), A_ub=A, b_ub=b, bounds=list(zip(q_lo, q_hi)), method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    raise SolverFailure(f"feasibility LP failed: {res.message}")


def check_assumption3(
    box: VparBox,
    X_samples,
    q_limits: tuple,
    v_limits: tuple,
    eta: float,
    epsilon: float,
    n_mc: int = 64,
    seed: int = 0,
) -> Assumption3Report:
    """Sampled check that every exogenous voltage in the box can be steered
    into the band shrunk by ``eta + epsilon`` for every sampled model.

    The reachable set of ``v_par`` values is convex for a fixed model, so
    box corners are the decisive samples: all corners are enumerated when
    there are at most ``n_mc`` of them, otherwise the two extreme corners
    plus random ones are used.
    """
    if n_mc < 1:
        raise DomainError("n_mc must be at least 1")
    rng = np.random.default_rng(seed)
    q_lo, q_hi = (np.asarray(a, dtype=float) for a in q_limits)
    v_lo, v_hi = (np.asarray(a, dtype=float) for a in v_limits)
    lo = v_lo + (eta + epsilon)
    hi = v_hi - (eta + epsilon)
    samples = _vpar_samples(box, n_mc, rng)
    Xs = np.asarray(X_samples, dtype=float)
    if Xs.ndim == 2:
        Xs = Xs[None]
    fails = []
    total = 0
    for a, X in enumerate(Xs):
        for b, vp in enumerate(samples):
            total += 1
            if not reachable(X, vp, q_lo, q_hi, lo, hi):
                fails.append((a, b))
    return Assumption3Report(1.0 - len(fails) / total, total, tuple(fails))
