"""Primal-dual interior-point method for convex quadratic cone programs.

Infeasible-start path following with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step. When the main solve does not converge a phase-one
program decides between ``Infeasible`` and ``NumericalFailure``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize as opt
import scipy.sparse as sp

from ..errors import DimensionMismatch
from .cones import Dims, Scaling, circ, circ_solve, identity, interior_shift, max_step
from .kkt import DenseKKT, LowRankKKT
from .program import ConicProgram, PSDBlock, Status, SolverReport

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200
LOWRANK_MIN_VARS = 150
PSD_MAX_ROUNDS = 60
REFINE_SKIP = 1e-10


@dataclass
class _Standard:
    """``G x + s = h`` with ``s`` in the cone ``dims``; ``A x = b``."""

    P: np.ndarray | None
    q: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    dims: Dims
    A: np.ndarray | None
    b: np.ndarray | None
    # row bookkeeping for mapping duals back
    n_lin: int
    lb_idx: np.ndarray
    ub_idx: np.ndarray
    GT: sp.csr_matrix | None = None

    def __post_init__(self):
        # transposing a sparse matrix is not free; the loop needs it often
        self.GT = self.G.T.tocsr()


def _standardize(prog: ConicProgram, extra_G=None, extra_h=None) -> _Standard:
    nv = prog.num_vars
    blocks = []
    rhs = []
    n_lin = 0
    if prog.G is not None:
        blocks.append(sp.csr_matrix(prog.G))
        rhs.append(prog.h)
        n_lin = prog.G.shape[0]
    if extra_G is not None and extra_G.shape[0]:
        blocks.append(sp.csr_matrix(extra_G))
        rhs.append(extra_h)
        n_lin += extra_G.shape[0]
    lb_idx = np.flatnonzero(np.isfinite(prog.lb)) if prog.lb is not None else np.zeros(0, int)
    ub_idx = np.flatnonzero(np.isfinite(prog.ub)) if prog.ub is not None else np.zeros(0, int)
    if lb_idx.size:
        blocks.append(sp.csr_matrix((-np.ones(lb_idx.size), (np.arange(lb_idx.size), lb_idx)), shape=(lb_idx.size, nv)))
        rhs.append(-prog.lb[lb_idx])
    if ub_idx.size:
        blocks.append(sp.csr_matrix((np.ones(ub_idx.size), (np.arange(ub_idx.size), ub_idx)), shape=(ub_idx.size, nv)))
        rhs.append(prog.ub[ub_idx])
    l = n_lin + lb_idx.size + ub_idx.size
    qdims = []
    for soc in prog.socs:
        Aq = sp.csr_matrix(soc.A)
        blocks.append(-sp.vstack([sp.csr_matrix(soc.c[None, :]), Aq], format="csr"))
        rhs.append(np.concatenate([[soc.d], soc.b]))
        qdims.append(Aq.shape[0] + 1)
    if blocks:
        G = sp.vstack(blocks, format="csr")
        h = np.concatenate(rhs).astype(float)
    else:
        G = sp.csr_matrix((0, nv))
        h = np.zeros(0)
    G.eliminate_zeros()
    A = None if prog.A_eq is None or prog.A_eq.shape[0] == 0 else np.asarray(prog.A_eq, dtype=float)
    b = None if A is None else prog.b_eq
    return _Standard(prog.P, prog.q, G, h, Dims(l, tuple(qdims)), A, b, n_lin, lb_idx, ub_idx)


def _make_kkt(sf: _Standard, kind: str):
    if kind not in ("dense", "augmented") and sf.A is None and sf.G.shape[1] >= LOWRANK_MIN_VARS:
        layout = LowRankKKT.layout(sf.P, sf.G, sf.dims)
        if layout is not None and layout[1].size + len(layout[2]) < sf.G.shape[1] // 2:
            return LowRankKKT(sf.P, sf.G, sf.dims, layout)
    if kind == "lowrank":
        raise ValueError("program structure does not allow the low-rank KKT solver")
    return DenseKKT(sf.P, sf.G, sf.A, sf.dims, augmented=kind == "augmented")


def _refined(kkt, sf: _Standard, W: Scaling, steps: int = 2):
    """Newton solver with iterative refinement on the unreduced system."""
    me = 0 if sf.A is None else sf.A.shape[0]

    def apply(dx, dy, dz):
        ox = sf.GT @ dz
        if sf.P is not None:
            ox = ox + (sf.P * dx if sf.P.ndim == 1 else sf.P @ dx)
        oy = np.zeros(0)
        if me:
            ox = ox + sf.A.T @ dy
            oy = sf.A @ dx
        oz = sf.G @ dx - W.apply(W.apply(dz))
        return ox, oy, oz

    def solve(bx, by, bz):
        dx, dy, dz = kkt.solve(bx, by, bz)
        if not me:
            dy = np.zeros(0)
        scale = max(np.abs(bx).max(initial=0.0), np.abs(by).max(initial=0.0), np.abs(bz).max(initial=0.0))
        for _ in range(steps):
            ex, ey, ez = apply(dx, dy, dz)
            rx, ry, rz = bx - ex, by - ey, bz - ez
            err = max(np.abs(rx).max(initial=0.0), np.abs(ry).max(initial=0.0), np.abs(rz).max(initial=0.0))
            # skip refinement once the residual is at rounding level
            if err <= REFINE_SKIP * max(scale, 1e-300):
                break
            cx, cy, cz = kkt.solve(rx, ry, rz)
            dx = dx + cx
            dz = dz + cz
            if me:
                dy = dy + cy
        return dx, dy, dz

    return solve


@dataclass
class _Result:
    converged: bool
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    iterations: int
    pres: float
    gap: float
    pcost: float
    message: str = ""


def _pcost(sf: _Standard, x):
    val = float(sf.q @ x)
    if sf.P is not None:
        val += 0.5 * float(x @ (sf.P * x if sf.P.ndim == 1 else sf.P @ x))
    return val


def _coneqp(sf: _Standard, tol: float, max_iter: int, kkt_kind: str = "auto") -> _Result:
    dims = sf.dims
    nv = sf.q.size
    me = 0 if sf.A is None else sf.A.shape[0]
    feastol = tol * 1e-1
    reltol = tol * 1e-1
    kkt = _make_kkt(sf, kkt_kind)
    e = identity(dims)
    W = Scaling(e, e.copy(), dims)
    kkt.factor(W)
    b = np.zeros(0) if sf.b is None else sf.b
    x, y, z = kkt.solve(-sf.q, b, sf.h)
    s = -z
    ap = interior_shift(s, dims)
    if ap >= -1e-8:
        s = s + (1.0 + max(ap, 0.0)) * e
    ad = interior_shift(z, dims)
    if ad >= -1e-8:
        z = z + (1.0 + max(ad, 0.0)) * e

    hnorm = max(1.0, float(np.linalg.norm(sf.h)))
    bnorm = max(1.0, float(np.linalg.norm(b)))
    qnorm = max(1.0, float(np.linalg.norm(sf.q)))
    pres_hist = []
    best = None
    it = 0
    while True:
        Px = np.zeros(nv) if sf.P is None else (sf.P * x if sf.P.ndim == 1 else sf.P @ x)
        rx = Px + sf.q + sf.GT @ z
        if me:
            rx = rx + sf.A.T @ y
            ry = sf.A @ x - b
        else:
            ry = np.zeros(0)
        rz = sf.G @ x + s - sf.h
        gap = float(s @ z)
        pcost = _pcost(sf, x)
        dcost = pcost + float(y @ ry) + float(z @ rz) - gap
        pres = max(float(np.linalg.norm(ry)) / bnorm if me else 0.0, float(np.linalg.norm(rz)) / hnorm)
        dres = float(np.linalg.norm(rx)) / qnorm
        pres_hist.append(pres)
        relgap = gap / max(abs(pcost), abs(dcost), 1e-300)
        if pres <= feastol and dres <= feastol and (gap <= feastol or relgap <= reltol):
            return _Result(True, x, y, z, s, it, pres, gap, pcost)
        # remember the last iterate meeting ``tol`` in case rounding later
        # stops progress towards the tighter internal targets
        if pres <= tol and dres <= tol and (gap <= tol or relgap <= tol):
            best = _Result(True, x, y, z, s, it, pres, gap, pcost, "stopped at tolerance")
        # Farkas certificate: z in the cone, G'z + A'y ~ 0, h'z + b'y < 0
        hz = -(float(sf.h @ z) + (float(b @ y) if me else 0.0))
        if hz > 0 and it >= 3:
            gz = sf.GT @ z + (sf.A.T @ y if me else 0.0)
            if float(np.linalg.norm(gz)) * hnorm <= feastol * hz:
                return _Result(False, x, y, z, s, it, pres, gap, pcost, "infeasibility certificate")
        if not (np.isfinite(pres) and np.isfinite(gap)):
            if best is not None:
                return replace(best, iterations=it)
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "non-finite iterate")
        if it >= max_iter:
            if best is not None:
                return replace(best, iterations=it)
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "iteration limit")
        if it >= 40 and pres > 1e3 * feastol and pres > 0.5 * pres_hist[-25]:
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "primal residual stalled")
        if abs(pcost) > 1e15 and pres <= feastol:
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "unbounded")
        it += 1

        try:
            W = Scaling(s, z, dims)
            lam = W.lam
            kkt.factor(W)
        except (np.linalg.LinAlgError, FloatingPointError):
            if best is not None:
                return replace(best, iterations=it)
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "singular scaling or KKT system")

        newton = _refined(kkt, sf, W)
        mu = gap / dims.degree
        lamsq = circ(lam, lam, dims)
        # predictor
        ds_aff = -lamsq
        li_ds = circ_solve(lam, ds_aff, dims)
        dx, dy, dz = newton(-rx, -ry, -rz - W.apply(li_ds))
        dsv = W.apply(li_ds - W.apply(dz))
        alpha = min(1.0, max_step(s, dsv, dims), max_step(z, dz, dims))
        sigma = float(((s + alpha * dsv) @ (z + alpha * dz)) / gap) ** 3
        sigma = min(max(sigma, 0.0), 1.0)
        # corrector
        ds_c = -lamsq - circ(W.apply_inv(dsv), W.apply(dz), dims) + sigma * mu * e
        li_ds = circ_solve(lam, ds_c, dims)
        dx, dy, dz = newton(-rx, -ry, -rz - W.apply(li_ds))
        dsv = W.apply(li_ds - W.apply(dz))
        alpha = min(1.0, 0.99 * min(max_step(s, dsv, dims), max_step(z, dz, dims)))
        if not np.isfinite(alpha) or alpha < 1e-12 or not np.isfinite(dx).all():
            if best is not None:
                return replace(best, iterations=it)
            return _Result(False, x, y, z, s, it, pres, gap, pcost, "step length collapsed")
        x = x + alpha * dx
        if me:
            y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * dsv


def _phase_one(sf: _Standard, tol: float, max_iter: int) -> tuple[bool | None, int]:
    """Minimize the uniform cone shift needed for feasibility.

    Returns ``(feasible, iterations)`` with ``feasible=None`` if undecided.
    """
    nv = sf.q.size
    dims = sf.dims
    ecol = identity(dims)
    l = dims.l
    G1 = sp.hstack([sf.G, sp.csr_matrix(-ecol[:, None])], format="csr")
    # tau >= -1 as an extra orthant row placed before the SOC blocks
    cap = sp.csr_matrix((np.array([-1.0]), (np.array([0]), np.array([nv]))), shape=(1, nv + 1))
    G1 = sp.vstack([G1[:l], cap, G1[l:]], format="csr")
    h1 = np.concatenate([sf.h[:l], [1.0], sf.h[l:]])
    q1 = np.zeros(nv + 1)
    q1[-1] = 1.0
    A1 = None if sf.A is None else np.hstack([sf.A, np.zeros((sf.A.shape[0], 1))])
    sf1 = _Standard(None, q1, G1, h1, Dims(l + 1, dims.q), A1, sf.b, 0, np.zeros(0, int), np.zeros(0, int))
    res = _coneqp(sf1, tol, max_iter, "dense")
    if not res.converged:
        return None, res.iterations
    tau = res.x[-1]
    scale = max(1.0, float(np.abs(sf.h).max(initial=0.0)))
    if tau > tol * scale:
        return False, res.iterations
    return True, res.iterations


def primal_residual(prog: ConicProgram, x: np.ndarray, extra_G=None, extra_h=None) -> float:
    """Largest constraint violation at ``x``, relative to ``max(1, |rhs|)``."""
    worst = 0.0

    def upd(v, rhs):
        nonlocal worst
        if v.size:
            worst = max(worst, float(np.max(v / np.maximum(1.0, np.abs(rhs)))))

    if prog.G is not None:
        upd(prog.G @ x - prog.h, prog.h)
    if extra_G is not None and extra_G.shape[0]:
        upd(extra_G @ x - extra_h, extra_h)
    if prog.A_eq is not None:
        upd(np.abs(prog.A_eq @ x - prog.b_eq), prog.b_eq)
    if prog.lb is not None:
        m = np.isfinite(prog.lb)
        upd(prog.lb[m] - x[m], prog.lb[m])
    if prog.ub is not None:
        m = np.isfinite(prog.ub)
        upd(x[m] - prog.ub[m], prog.ub[m])
    for soc in prog.socs:
        upd(np.array([soc.violation(x)]), np.array([soc.d]))
    if prog.psd is not None:
        from ..grid import from_triangle_vector

        M = from_triangle_vector(x[prog.psd.start: prog.psd.stop], prog.psd.n)
        worst = max(worst, -float(np.linalg.eigvalsh(M)[0]))
    return max(worst, 0.0)


def _solve_socp(prog: ConicProgram, tol, max_iter, kkt_kind, extra_G=None, extra_h=None):
    sf = _standardize(prog, extra_G, extra_h)
    if sf.dims.size == 0:
        return _solve_unconstrained(prog, sf)
    res = _coneqp(sf, tol, max_iter, kkt_kind)
    iters = res.iterations
    if res.converged:
        status = Status.OPTIMAL
    elif res.message == "infeasibility certificate":
        status = Status.INFEASIBLE
    else:
        feasible, it1 = _phase_one(sf, tol, max_iter)
        iters += it1
        if feasible is False:
            status = Status.INFEASIBLE
        elif res.message == "unbounded":
            status = Status.UNBOUNDED
        else:
            status = Status.NUMERICAL_FAILURE
    duals = {"y": res.y, "z": res.z, "s": res.s, "n_lin": sf.n_lin, "dims": sf.dims,
             "lb_idx": sf.lb_idx, "ub_idx": sf.ub_idx}
    return res.x, status, iters, duals, res.message


def _solve_unconstrained(prog: ConicProgram, sf: _Standard):
    nv = prog.num_vars
    P = np.zeros((nv, nv)) if prog.P is None else (np.diag(prog.P) if prog.P.ndim == 1 else prog.P)
    if sf.A is None:
        K, rhs = P, -prog.q
    else:
        me = sf.A.shape[0]
        K = np.block([[P, sf.A.T], [sf.A, np.zeros((me, me))]])
        rhs = np.concatenate([-prog.q, sf.b])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    resid = np.linalg.norm(K @ sol - rhs) / max(1.0, np.linalg.norm(rhs))
    x = sol[:nv]
    if resid > 1e-9:
        status = Status.UNBOUNDED if sf.A is None else Status.INFEASIBLE
    else:
        status = Status.OPTIMAL
    return x, status, 1, {"y": sol[nv:]}, ""


def _psd_cut(v: np.ndarray, start: int, n: int, nv: int) -> np.ndarray:
    """Row ``g`` with ``g @ x = -v' M v`` for the matrix stored at ``start``."""
    iu, ju = np.triu_indices(n)
    coef = np.where(iu == ju, v[iu] ** 2, 2.0 * v[iu] * v[ju])
    row = np.zeros(nv)
    row[start: start + coef.size] = -coef
    return row


def solve(program: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          kkt: str = "auto") -> SolverReport:
    """Solve a :class:`ConicProgram`.

    ``kkt`` selects the Newton-system strategy: ``"auto"``, ``"dense"``,
    ``"augmented"`` (dense, factored in augmented form) or ``"lowrank"``.
    The PSD block, if any, is enforced with eigenvector cuts.
    """
    t0 = time.perf_counter()
    if program.lb is not None and program.ub is not None and (program.lb > program.ub).any():
        return SolverReport(Status.INFEASIBLE, None, np.nan, np.inf, 0, time.perf_counter() - t0,
                            message="empty variable bounds")
    cuts = np.zeros((0, program.num_vars))
    iters = 0
    rounds = 0
    while True:
        x, status, it, duals, msg = _solve_socp(program, tol, max_iter, kkt, cuts, np.zeros(cuts.shape[0]))
        iters += it
        if status is not Status.OPTIMAL or program.psd is None:
            break
        blk = program.psd
        from ..grid import from_triangle_vector

        M = from_triangle_vector(x[blk.start: blk.stop], blk.n)
        evals, evecs = np.linalg.eigh(M)
        neg = evals < -tol * 1e-2
        if not neg.any():
            break
        rounds += 1
        if rounds > PSD_MAX_ROUNDS:
            status = Status.NUMERICAL_FAILURE
            msg = "PSD cuts did not converge"
            break
        new = np.array([_psd_cut(evecs[:, k], blk.start, blk.n, program.num_vars) for k in np.flatnonzero(neg)])
        cuts = np.vstack([cuts, new])

    wall = time.perf_counter() - t0
    if x is None or status is Status.INFEASIBLE:
        return SolverReport(status, None if status is Status.INFEASIBLE else x, np.nan, np.inf, iters, wall,
                            message=msg)
    resid = primal_residual(program, x, cuts, np.zeros(cuts.shape[0]))
    if status is Status.OPTIMAL and resid > tol:
        status = Status.NUMERICAL_FAILURE
        msg = f"residual {resid:.3g} above tolerance"
    duals["psd_cuts"] = cuts
    return SolverReport(status, x, program.objective(x), resid, iters, wall, duals, msg)


def kkt_residuals(program: ConicProgram, x: np.ndarray) -> dict:
    """Stationarity, primal and complementarity residuals at ``x``.

    Multipliers are the nonnegative least-squares fit that balances
    stationarity against complementary slackness, so the audit does not
    rely on the solver's own duals.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (program.num_vars,):
        raise DimensionMismatch(f"solution has shape {x.shape}, expected ({program.num_vars},)")
    grads = []
    slacks = []
    free = []

    if program.G is not None:
        G = program.G.toarray() if sp.issparse(program.G) else np.asarray(program.G)
        for g, hv in zip(G, program.h):
            grads.append(g)
            slacks.append(hv - g @ x)
    for name, sign in (("lb", -1.0), ("ub", 1.0)):
        bnd = getattr(program, name)
        if bnd is None:
            continue
        for j in np.flatnonzero(np.isfinite(bnd)):
            g = np.zeros(program.num_vars)
            g[j] = sign
            grads.append(g)
            slacks.append(sign * (bnd[j] - x[j]))
    for soc in program.socs:
        r = soc.A @ x + soc.b
        nr = np.linalg.norm(r)
        Ar = soc.A.T @ (r / nr) if nr > 0 else np.zeros(program.num_vars)
        grads.append(np.asarray(Ar).ravel() - soc.c)
        slacks.append(-soc.violation(x))
    if program.A_eq is not None:
        for a in program.A_eq:
            free.append(a)

    grad_f = program.gradient(x)
    slacks = np.array(slacks)
    m = len(grads)
    J = np.array(grads).T if m else np.zeros((program.num_vars, 0))
    F = np.array(free).T if free else np.zeros((program.num_vars, 0))
    # columns: inequality multipliers, then equality multipliers split in sign
    top = np.hstack([J, F, -F])
    bottom = np.hstack([np.diag(np.abs(slacks)) if m else np.zeros((0, 0)),
                        np.zeros((m, 2 * F.shape[1]))]) if m else np.zeros((0, top.shape[1]))
    Mat = np.vstack([top, bottom])
    rhs = np.concatenate([-grad_f, np.zeros(m)])
    if Mat.shape[1]:
        lam, _ = opt.nnls(Mat, rhs, maxiter=50 * Mat.shape[1])
    else:
        lam = np.zeros(0)
    stat = grad_f + (top @ lam if lam.size else 0.0)
    absviol = 0.0
    if m:
        absviol = float(np.max(np.maximum(-slacks, 0.0)))
    if program.A_eq is not None:
        absviol = max(absviol, float(np.abs(program.A_eq @ x - program.b_eq).max(initial=0.0)))
    comp = float(np.max(np.abs(lam[:m] * slacks), initial=0.0)) if m else 0.0
    return {"stationarity": float(np.linalg.norm(stat)), "primal": absviol, "complementarity": comp}
