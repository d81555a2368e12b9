"""Consistent model chasing.

Every observed transition ``(v, v', u, qc)`` cuts the set of reactance
sensitivity matrices that could have produced it. For bus ``i``::

    |v'_i - v_i - (X u)_i| <= eta          (noise bound)
    lo_i <= v'_i - (X qc)_i <= hi_i        (exogenous voltage box)

Both are linear in the upper-triangle coordinates of ``X``. The estimate is
moved by greedy projection: the closest point, in triangle norm, of the
current consistent set to the previous estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.optimize as opt
import scipy.sparse as sp
from numpy.typing import NDArray

from .errors import DomainError, InfeasibleConsistentSet, SolverFailure
from .grid import (
    RadialNetwork,
    from_triangle_vector,
    permute_buses,
    sensitivity_matrices,
    tri_dim,
    tri_index_map,
    to_triangle_vector,
    triangle_norm,
)
from .profiles import VparBox
from .solver import SOC, ConicProgram, PSDBlock, Status, solve

log = logging.getLogger(__name__)

FEASIBLE_TOL = 1e-9
MEMBERSHIP_TOL = 1e-8
WORKING_SET_BATCH = 150
WORKING_SET_MAX = 700
ETA_INFLATION = 1.05
DUAL_BUDGETS = (60, 400, 3000)
ACTIVE_SET_ITERATIONS = 30
GRAM_RANK_TOL = 1e-10


@dataclass(frozen=True)
class UncertaintySet:
    """Triangle-norm ball of admissible sensitivity matrices."""

    center: NDArray[np.float64]
    radius: float
    enforce_nonneg: bool = True
    enforce_psd: bool = False

    def __post_init__(self):
        if self.radius < 0:
            raise DomainError("radius must be nonnegative")

    @classmethod
    def around(cls, X_star, alpha: float, **flags) -> "UncertaintySet":
        """The set of radius ``alpha * ||X*||`` centred on ``X*``."""
        return cls(np.asarray(X_star, dtype=float), alpha * triangle_norm(X_star), **flags)

    @property
    def n(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def distance(self, X) -> float:
        return triangle_norm(np.asarray(X) - self.center)

    def contains(self, X, tol: float = MEMBERSHIP_TOL) -> bool:
        X = np.asarray(X, dtype=float)
        if self.distance(X) > self.radius + tol:
            return False
        if self.enforce_nonneg and X.min() < -tol:
            return False
        if self.enforce_psd and np.linalg.eigvalsh(X)[0] < -tol:
            return False
        return True

    def project_ball(self, X) -> NDArray[np.float64]:
        """Radial projection onto the ball (ignores the sign/PSD flags)."""
        X = np.asarray(X, dtype=float)
        d = self.distance(X)
        if d <= self.radius:
            return X.copy()
        return self.center + (X - self.center) * (self.radius / d)


class ObservationStore:
    """Append-only record of transitions with per-bus visibility."""

    def __init__(self, n: int, hidden=()):
        self.n = n
        self.mask = np.ones(n, dtype=bool)
        for b in hidden:
            if not 1 <= b <= n:
                raise DomainError(f"hidden bus {b} outside 1..{n}")
            self.mask[b - 1] = False
        self.mask.setflags(write=False)
        self._cap = 64
        self._k = 0
        self._v = np.empty((self._cap, n))
        self._vn = np.empty((self._cap, n))
        self._u = np.empty((self._cap, n))
        self._qc = np.empty((self._cap, n))

    def __len__(self) -> int:
        return self._k

    def append(self, v, v_next, u, qc) -> None:
        if self._k == self._cap:
            self._cap *= 2
            for name in ("_v", "_vn", "_u", "_qc"):
                old = getattr(self, name)
                new = np.empty((self._cap, self.n))
                new[: self._k] = old[: self._k]
                setattr(self, name, new)
        k = self._k
        self._v[k] = v
        self._vn[k] = v_next
        self._u[k] = u
        self._qc[k] = qc
        self._k += 1

    def arrays(self, idx=None):
        """``(v, v_next, u, qc)`` for the selected tuples (all by default)."""
        sl = slice(0, self._k) if idx is None else np.asarray(idx, dtype=np.int64)
        return self._v[sl], self._vn[sl], self._u[sl], self._qc[sl]

    def prefix(self, k: int) -> "ObservationStore":
        """Copy holding the first ``k`` tuples."""
        out = ObservationStore(self.n)
        out.mask = self.mask
        for row in zip(*self.arrays(np.arange(min(k, self._k)))):
            out.append(*row)
        return out


@dataclass
class ConsistentSetView:
    """Constraint rows from a subset of the store, plus the model set."""

    uset: UncertaintySet
    box: VparBox
    eta: float
    mask: NDArray[np.bool_]
    tuples: NDArray[np.int64]
    dv: NDArray[np.float64] = field(repr=False)
    vn: NDArray[np.float64] = field(repr=False)
    u: NDArray[np.float64] = field(repr=False)
    qc: NDArray[np.float64] = field(repr=False)

    @property
    def n(self) -> int:
        return self.uset.n

    @property
    def num_rows(self) -> int:
        return 4 * self.tuples.size * int(self.mask.sum())

    def with_eta(self, eta: float) -> "ConsistentSetView":
        return replace(self, eta=eta)

    def slacks(self, X) -> NDArray[np.float64]:
        """Slack of every row, shape ``(k, n, 4)``; hidden buses get ``+inf``.

        The four kinds are the upper and lower noise rows and the upper and
        lower box rows.
        """
        Xu = self.u @ X
        Xq = self.qc @ X
        out = np.empty((self.tuples.size, self.n, 4))
        out[..., 0] = self.eta + self.dv - Xu
        out[..., 1] = self.eta - self.dv + Xu
        out[..., 2] = (self.vn - self.box.lo) - Xq
        out[..., 3] = (self.box.hi - self.vn) + Xq
        out[:, ~self.mask, :] = np.inf
        return out

    def rows(self, flat_idx: NDArray[np.int64]) -> tuple[sp.csr_matrix, NDArray[np.float64]]:
        """``G x <= h`` for the rows at flat positions of :meth:`slacks`."""
        n = self.n
        T = tri_index_map(n)
        k, rem = np.divmod(flat_idx, n * 4)
        bus, kind = np.divmod(rem, 4)
        coef = np.where((kind < 2)[:, None], self.u[k], self.qc[k])
        sign = np.where((kind % 2 == 0), 1.0, -1.0)
        data = (coef * sign[:, None]).ravel()
        cols = T[bus].ravel()
        rowids = np.repeat(np.arange(flat_idx.size), n)
        G = sp.csr_matrix((data, (rowids, cols)), shape=(flat_idx.size, tri_dim(n)))
        G.sum_duplicates()
        h = np.select(
            [kind == 0, kind == 1, kind == 2],
            [self.eta + self.dv[k, bus], self.eta - self.dv[k, bus], self.vn[k, bus] - self.box.lo[bus]],
            default=self.box.hi[bus] - self.vn[k, bus],
        )
        return G, h


@dataclass(frozen=True)
class SubsamplePolicy:
    """Always keep the ``latest_k`` newest tuples plus ``random_k`` uniform
    draws (without replacement) from the rest. ``None`` keeps everything."""

    latest_k: int | None = 20
    random_k: int | None = 80
    seed: int = 0


def select_tuples(size: int, policy: SubsamplePolicy, step: int) -> NDArray[np.int64]:
    if policy.latest_k is None or policy.random_k is None or size <= policy.latest_k + policy.random_k:
        return np.arange(size, dtype=np.int64)
    latest = np.arange(size - policy.latest_k, size)
    rng = np.random.default_rng([policy.seed, step])
    older = rng.choice(size - policy.latest_k, size=policy.random_k, replace=False)
    return np.sort(np.concatenate([older, latest])).astype(np.int64)


def build_view(
    store: ObservationStore,
    uset: UncertaintySet,
    box: VparBox,
    eta: float,
    policy: SubsamplePolicy = SubsamplePolicy(),
    step: int = 0,
) -> ConsistentSetView:
    idx = select_tuples(len(store), policy, step)
    v, vn, u, qc = store.arrays(idx)
    return ConsistentSetView(uset, box, eta, store.mask, idx, vn - v, vn, u, qc)


def full_view(store: ObservationStore, uset: UncertaintySet, box: VparBox, eta: float) -> ConsistentSetView:
    return build_view(store, uset, box, eta, SubsamplePolicy(None, None))


def membership(X, store: ObservationStore, uset: UncertaintySet, box: VparBox, eta: float,
               tol: float = MEMBERSHIP_TOL) -> bool:
    """Does ``X`` satisfy every constraint from every stored tuple?"""
    X = np.asarray(X, dtype=float)
    if not uset.contains(X, tol):
        return False
    if len(store) == 0:
        return True
    return bool(full_view(store, uset, box, eta).slacks(X).min() >= -tol)


@dataclass
class SelResult:
    X: NDArray[np.float64]
    movement: float
    solved: bool  # False when the previous estimate was already feasible
    rounds: int = 0
    working_rows: int = 0
    iterations: int = 0
    polished: bool = False
    eta_used: float = 0.0


def _set_feasible(x: NDArray[np.float64], view: ConsistentSetView, tol: float) -> bool:
    uset = view.uset
    c = to_triangle_vector(uset.center)
    if np.linalg.norm(x - c) > uset.radius + tol:
        return False
    if uset.enforce_nonneg and x.min() < -tol:
        return False
    if uset.enforce_psd and np.linalg.eigvalsh(from_triangle_vector(x, view.n))[0] < -tol:
        return False
    return True


def _ball_affine_projection(x0, c, r, A, b, free):
    """Project ``x0`` onto ``{A x = b, x_fixed = 0, ||x - c|| <= r}`` with the
    listed constraints active. Returns ``(x, lam, mu)`` or ``None``."""
    Af = A[:, free]
    S = np.zeros(0)
    null = np.zeros((A.shape[0], 0))
    if Af.shape[0]:
        # pseudo-inverse pieces from the Gram matrix, computed once:
        # Af Af' = U S^2 U', V' = S^-1 U' Af. Cheaper than an SVD of Af; the
        # lost accuracy is won back by one refinement pass in affine()
        w, U = la.eigh(Af @ Af.T, check_finite=False)
        w, U = w[::-1], U[:, ::-1]
        keep = w > max(w[0], 0.0) * GRAM_RANK_TOL
        # left null space of Af: the freedom in the multipliers when active
        # rows are dependent
        null = U[:, ~keep]
        U, S = U[:, keep], np.sqrt(w[keep])
        Vt = (U.T @ Af) / S[:, None]

    def affine(y):
        x = np.zeros_like(y)
        yf = y[free]
        if Af.shape[0]:
            # minimum-norm correction lies in the row space of Af
            coef = (U.T @ (Af @ yf - b)) / S
            corr = Vt.T @ coef
            coef2 = (U.T @ (Af @ (yf - corr) - b)) / S
            corr = corr + Vt.T @ coef2
            lam = U @ ((coef + coef2) / S)
        else:
            lam, corr = np.zeros(0), 0.0
        x[free] = yf - corr
        return x, lam

    deficient = Af.shape[0] > 0 and S.size < Af.shape[0]

    def settle(x, lam, mu):
        # with dependent rows the multipliers are lam + N t for any t; look
        # for a nonnegative member by maximizing its smallest entry
        if deficient and lam.min() < 0 and null.shape[1]:
            d = null.shape[1]
            res = opt.linprog(np.r_[np.zeros(d), -1.0], A_ub=np.hstack([-null, np.ones((lam.size, 1))]),
                              b_ub=lam, bounds=[(None, None)] * d + [(None, 0.0)], method="highs")
            if res.status == 0:
                alt = lam + null @ res.x[:d]
                if alt.min() >= -1e-12 * max(1.0, np.abs(alt).max()):
                    lam = np.maximum(alt, 0.0)
        return x, lam, mu

    x, d = affine(x0)
    if r is None or np.linalg.norm(x - c) <= r:
        return settle(x, d, 0.0)

    def gap(mu):
        y = (x0 + mu * c) / (1.0 + mu)
        return np.linalg.norm(affine(y)[0] - c) - r

    hi = 1.0
    while gap(hi) > 0:
        hi *= 10.0
        if hi > 1e16:
            return None
    mu = opt.brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    x, d = affine((x0 + mu * c) / (1.0 + mu))
    # multipliers of the scaled problem: x - x0 + mu (x - c) + A' lam = 0
    return settle(x, d * (1.0 + mu), mu)


def _polish(x0, x_ipm, G, h, view: ConsistentSetView, duals: dict, tol: float):
    """Exact projection on the active set identified by the interior point
    solution; ``None`` if the identified set fails the optimality checks."""
    z = duals.get("z")
    s = duals.get("s")
    if z is None or s is None:
        return None
    k = G.shape[0]
    n_lb = duals["lb_idx"].size
    act_rows = np.flatnonzero(z[:k] > s[:k])
    fixed = np.zeros(x0.size, dtype=bool)
    if n_lb:
        zl, sl = z[k: k + n_lb], s[k: k + n_lb]
        fixed[duals["lb_idx"][zl > sl]] = True
    ball_active = False
    if duals["dims"].q:
        a = duals["dims"].l
        ball_active = z[a] > s[a]
    return _polish_active(x0, x_ipm, G, h, view, act_rows, fixed, ball_active, tol)


def _polish_active(x0, x_ref, G, h, view: ConsistentSetView, act_rows, fixed, ball_active: bool, tol: float):
    """Solve the projection with the given constraints held active and check
    every optimality condition; ``None`` if any check fails."""
    free = ~fixed
    uset = view.uset
    c = to_triangle_vector(uset.center)
    A = G[act_rows].toarray()
    res = _ball_affine_projection(x0, c, uset.radius if ball_active else None, A, h[act_rows], free)
    if res is None:
        return None
    x, lam, mu = res
    if mu < 0 or (lam.size and lam.min() < -1e-9 * max(1.0, np.abs(lam).max())):
        return None
    # multipliers of x >= 0 on the fixed coordinates, from stationarity
    grad = x - x0 + mu * (x - c) + (A.T @ lam if lam.size else 0.0)
    if fixed.any() and grad[fixed].min() < -1e-9 * max(1.0, np.abs(grad).max()):
        return None
    if np.linalg.norm(grad[free]) > 1e-8 * max(1.0, np.linalg.norm(x0)):
        return None
    if not _set_feasible(x, view, tol) or (G @ x - h).max(initial=0.0) > tol:
        return None
    if np.linalg.norm(x - x_ref) > 1e-4 * max(1.0, np.linalg.norm(x_ref)):
        return None
    return x


def _dual_project(x0, G, h, view: ConsistentSetView, tol: float):
    """Projection through its dual, a bound-constrained smooth problem in
    one multiplier per row plus one for the ball. The dual only identifies
    the active set; the answer is the exact polished point or ``None``."""
    uset = view.uset
    c = to_triangle_vector(uset.center)
    r = uset.radius
    nonneg = uset.enforce_nonneg
    k = G.shape[0]
    GT = G.T.tocsr()

    def primal(z):
        lam, mu = z[:k], z[k]
        y = (x0 + mu * c - GT @ lam) / (1.0 + mu)
        return (np.maximum(y, 0.0) if nonneg else y), y

    def neg_dual(z):
        x, _ = primal(z)
        gx = G @ x - h
        d = x - c
        ball = 0.5 * (d @ d - r * r)
        f = 0.5 * float((x - x0) @ (x - x0)) + z[:k] @ gx + z[k] * ball
        return -f, -np.concatenate([gx, [ball]])

    z = np.zeros(k + 1)
    for budget in DUAL_BUDGETS:
        res = opt.minimize(neg_dual, z, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * (k + 1),
                           options={"maxiter": budget, "ftol": 1e-15, "gtol": 1e-12, "maxcor": 30})
        z = res.x
        x, y = primal(z)
        fixed = (y < 0) if nonneg else np.zeros(x0.size, dtype=bool)
        out = _active_set(x0, G, h, view, z[:k] > 0, fixed, bool(z[k] > 0), tol)
        if out is not None or res.status == 0:
            return out
    return None


def _active_set(x0, G, h, view: ConsistentSetView, act, fixed, ball: bool, tol: float):
    """Primal-dual active set iterations from a guessed active set. Each
    pass solves the equality-constrained projection exactly, then releases
    constraints with negative multipliers and adds violated ones."""
    uset = view.uset
    c = to_triangle_vector(uset.center)
    nonneg = uset.enforce_nonneg
    act = act.copy()
    fixed = fixed.copy()
    seen = set()
    for _ in range(ACTIVE_SET_ITERATIONS):
        key = hash((act.tobytes(), fixed.tobytes(), ball))
        if key in seen:
            return None  # cycling; the caller refines the dual guess instead
        seen.add(key)
        rows = np.flatnonzero(act)
        A = G[rows].toarray()
        res = _ball_affine_projection(x0, c, uset.radius if ball else None, A, h[rows], ~fixed)
        if res is None:
            return None
        x, lam, mu = res
        grad = x - x0 + mu * (x - c) + (A.T @ lam if lam.size else 0.0)
        scale = max(1.0, np.abs(lam).max(initial=0.0), np.abs(grad).max(initial=0.0))
        drop_rows = rows[lam < -1e-9 * scale]
        add_rows = np.flatnonzero(~act & (G @ x - h > tol))
        release = fixed & (grad < -1e-9 * scale)
        pin = ~fixed & (x < -tol) if nonneg else np.zeros(x.size, dtype=bool)
        grow_ball = not ball and np.linalg.norm(x - c) > uset.radius + tol
        if not (drop_rows.size or add_rows.size or release.any() or pin.any() or grow_ball):
            return _polish_active(x0, x, G, h, view, rows, fixed, ball, tol)
        act[drop_rows] = False
        act[add_rows] = True
        fixed = (fixed & ~release) | pin
        ball = ball or grow_ball
    return None


def _project(x0: NDArray[np.float64], view: ConsistentSetView, tol: float, solver_tol: float):
    n = view.n
    m = tri_dim(n)
    uset = view.uset
    c = to_triangle_vector(uset.center)
    flat_slack = view.slacks(from_triangle_vector(x0, n)).ravel()
    working = np.zeros(0, dtype=np.int64)
    rounds = 0
    iters = 0
    x = x0
    while True:
        rounds += 1
        candidates = np.flatnonzero(flat_slack < -tol)
        candidates = candidates[~np.isin(candidates, working)]
        if rounds > 1 and candidates.size == 0:
            break
        if candidates.size > WORKING_SET_BATCH:
            candidates = candidates[np.argsort(flat_slack[candidates], kind="stable")[:WORKING_SET_BATCH]]
        working = np.sort(np.concatenate([working, candidates]))
        if working.size > WORKING_SET_MAX:
            # give up on the working set and take every row at once
            working = np.flatnonzero(np.isfinite(flat_slack))
        G, h = view.rows(working)
        if not uset.enforce_psd:
            xd = _dual_project(x0, G, h, view, tol)
            if xd is not None:
                x, polished = xd, True
                flat_slack = view.slacks(from_triangle_vector(x, n)).ravel()
                if flat_slack.min() >= -tol or working.size >= np.isfinite(flat_slack).sum():
                    break
                continue
        prog = ConicProgram(
            m, -x0, P=np.ones(m), const=0.5 * float(x0 @ x0), G=G, h=h,
            socs=[SOC.ball(m, c, uset.radius)],
            lb=np.zeros(m) if uset.enforce_nonneg else None,
            psd=PSDBlock(0, n) if uset.enforce_psd else None,
        )
        rep = solve(prog, tol=solver_tol)
        iters += rep.iterations
        if rep.status is Status.INFEASIBLE:
            return None, rounds, working.size, iters, False
        if not rep.ok:
            raise SolverFailure(f"projection failed: {rep.status.value} ({rep.message})")
        x = rep.x
        polished = False
        if not uset.enforce_psd:
            xp = _polish(x0, x, G, h, view, rep.duals, tol)
            if xp is not None:
                x, polished = xp, True
        flat_slack = view.slacks(from_triangle_vector(x, n)).ravel()
        if flat_slack.min() >= -tol or working.size >= np.isfinite(flat_slack).sum():
            break
    return x, rounds, working.size, iters, polished


def sel_project(prev, view: ConsistentSetView, inflate_on_infeasible: bool = False,
                tol: float = FEASIBLE_TOL, solver_tol: float = 1e-9) -> SelResult:
    """Greedy projection of ``prev`` onto the consistent set of ``view``.

    Returns ``prev`` unchanged when it already satisfies every row. An empty
    consistent set raises :class:`InfeasibleConsistentSet` unless
    ``inflate_on_infeasible`` is set, in which case the noise bound is
    inflated by 5% and the projection retried once.
    """
    prev = np.asarray(prev, dtype=float)
    n = view.n
    x0 = to_triangle_vector(prev)
    feasible_prev = _set_feasible(x0, view, tol)
    if feasible_prev and (view.tuples.size == 0 or view.slacks(prev).min() >= -tol):
        return SelResult(prev.copy(), 0.0, False, eta_used=view.eta)
    x, rounds, nrows, iters, polished = _project(x0, view, tol, solver_tol)
    eta_used = view.eta
    if x is None and inflate_on_infeasible:
        eta_used = view.eta * ETA_INFLATION
        log.warning("consistent set empty; retrying with eta inflated to %.6g", eta_used)
        x, rounds, nrows, iters, polished = _project(x0, view.with_eta(eta_used), tol, solver_tol)
    if x is None:
        raise InfeasibleConsistentSet(
            f"no model is consistent with {view.tuples.size} observations at eta={eta_used:.6g}"
        )
    X = from_triangle_vector(x, n)
    return SelResult(X, float(np.linalg.norm(x - x0)), True, rounds, nrows, iters, polished, eta_used)


def init_estimate(net: RadialNetwork, sigma: float, permute: bool, alpha: float, seed: int,
                  X_star=None) -> NDArray[np.float64]:
    """Initial guess: perturb every line reactance by a factor drawn from
    ``[1 - sigma, 1 + sigma]``, rebuild X, optionally relabel the buses at
    random, then pull the result into the ball of radius ``alpha ||X*||``.
    """
    if not 0.0 <= sigma <= 1.0:
        raise DomainError("sigma must lie in [0, 1]")
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    rng = np.random.default_rng(seed)
    if X_star is None:
        X_star = sensitivity_matrices(net, warn=False).X
    factors = rng.uniform(1.0 - sigma, 1.0 + sigma, size=len(net.edges))
    xs = np.array([e.x for e in net.edges]) * factors
    # a factor of exactly zero would break the tree; keep reactances positive
    xs = np.maximum(xs, 1e-6 * np.array([e.x for e in net.edges]))
    X_hat = sensitivity_matrices(net.with_reactances(xs), warn=False).X
    if permute:
        X_hat = permute_buses(X_hat, rng.permutation(net.n))
    return UncertaintySet.around(X_star, alpha).project_ball(X_hat)


def competitive_log_gamma(n: int) -> float:
    """Natural log of ``pi (m - 1) m^(m/2)`` with ``m = n(n+1)/2``.

    ``n = 1`` gives ``m = 1`` and ``gamma = 0``; the log is ``-inf``.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    m = tri_dim(n)
    if m == 1:
        return -math.inf
    return math.log(math.pi) + math.log(m - 1) + 0.5 * m * math.log(m)


def mistake_bound_log(diameter: float, rho: float, n: int) -> float:
    """``log10`` of ``(4 gamma / rho) * diameter + 1``."""
    if not rho > 0:
        raise DomainError("rho must be positive")
    if not diameter > 0:
        raise DomainError("diameter must be positive")
    lg = competitive_log_gamma(n)
    if lg == -math.inf:
        return 0.0
    ln_term = math.log(4.0) + lg - math.log(rho) + math.log(diameter)
    return float(np.logaddexp(ln_term, 0.0) / math.log(10.0))
