import cvxpy as cp
import numpy as np
import pytest
import scipy.sparse as sp

from gridchase.grid import from_triangle_vector, to_triangle_vector
from gridchase.solver import SOC, ConicProgram, PSDBlock, Status, kkt_residuals, primal_residual, solve

TIGHT = dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)


def random_program(seed, nv=8, m=10, n_soc=2, eq=False, bounds=True):
    """Feasible convex program together with its cvxpy twin."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=nv)
    B = rng.normal(size=(nv, nv))
    P = B @ B.T / nv + 0.1 * np.eye(nv)
    q = rng.normal(size=nv)
    G = rng.normal(size=(m, nv))
    h = G @ x0 + rng.uniform(0.1, 1.0, m)
    socs = []
    for _ in range(n_soc):
        A = rng.normal(size=(3, nv))
        b = rng.normal(size=3)
        c = rng.normal(size=nv) * 0.1
        d = float(np.linalg.norm(A @ x0 + b) - c @ x0 + 0.5)
        socs.append(SOC(A, b, c, d))
    A_eq = b_eq = None
    if eq:
        A_eq = rng.normal(size=(2, nv))
        b_eq = A_eq @ x0
    lb = ub = None
    if bounds:
        lb = x0 - rng.uniform(0.1, 1.0, nv)
        ub = x0 + rng.uniform(0.1, 1.0, nv)
    prog = ConicProgram(nv, q, P=P, G=G, h=h, socs=socs, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub)

    x = cp.Variable(nv)
    cons = [G @ x <= h] + [cp.norm(s.A @ x + s.b) <= s.c @ x + s.d for s in socs]
    if eq:
        cons.append(A_eq @ x == b_eq)
    if bounds:
        cons += [x >= lb, x <= ub]
    ref = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + q @ x), cons)
    return prog, ref


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("eq", [False, True])
def test_matches_reference_solver(seed, eq):
    prog, ref = random_program(seed, eq=eq)
    rep = solve(prog, tol=1e-9)
    ref.solve(solver="CLARABEL", **TIGHT)
    assert rep.status is Status.OPTIMAL
    assert rep.objective == pytest.approx(ref.value, rel=1e-6, abs=1e-8)
    assert primal_residual(prog, rep.x) <= 1e-8
    res = kkt_residuals(prog, rep.x)
    assert max(res.values()) < 1e-5


@pytest.mark.parametrize("kind", ["dense", "augmented"])
def test_kkt_variants_agree(kind):
    prog, _ = random_program(3)
    a = solve(prog, tol=1e-10)
    b = solve(prog, tol=1e-10, kkt=kind)
    assert np.allclose(a.x, b.x, atol=1e-6)


def test_lowrank_projection_matches_dense():
    # projection onto a ball, a few cuts and the nonnegative orthant
    rng = np.random.default_rng(1)
    m = 200
    x0 = rng.normal(size=m)
    c = np.abs(rng.normal(size=m))
    G = sp.random(6, m, density=0.1, random_state=1, format="csr")
    h = G @ c + 0.01
    prog = ConicProgram(m, -x0, P=np.ones(m), G=G, h=h, socs=[SOC.ball(m, c, 3.0)], lb=np.zeros(m))
    a = solve(prog, tol=1e-9, kkt="lowrank")
    b = solve(prog, tol=1e-9, kkt="dense")
    assert a.ok and b.ok
    assert np.allclose(a.x, b.x, atol=1e-6)
    x = cp.Variable(m)
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(x - x0)),
               [G.toarray() @ x <= h, x >= 0, cp.norm(x - c) <= 3.0]).solve(solver="CLARABEL", **TIGHT)
    assert np.allclose(a.x, x.value, atol=1e-5)


def test_infeasible_detected():
    prog = ConicProgram(2, np.zeros(2), P=np.ones(2), G=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                        h=np.array([-1.0, -1.0]))
    assert solve(prog).status is Status.INFEASIBLE
    crossed = ConicProgram(1, np.zeros(1), lb=np.array([1.0]), ub=np.array([0.0]))
    assert solve(crossed).status is Status.INFEASIBLE


def test_unconstrained_qp():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = np.array([1.0, -1.0])
    rep = solve(ConicProgram(2, q, P=P))
    assert rep.ok
    assert np.allclose(rep.x, np.linalg.solve(P, -q))


def test_psd_block_matches_reference():
    rng = np.random.default_rng(4)
    n = 3
    M = rng.normal(size=(n, n))
    M = (M + M.T) / 2 - 1.5 * np.eye(n)
    x0 = to_triangle_vector(M)
    m = x0.size
    rep = solve(ConicProgram(m, -x0, P=np.ones(m), psd=PSDBlock(0, n)), tol=1e-9)
    assert rep.ok
    S = cp.Variable((n, n), symmetric=True)
    iu = np.triu_indices(n)
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(S[iu] - x0)), [S >> 0]).solve(solver="CLARABEL", **TIGHT)
    X = from_triangle_vector(rep.x, n)
    assert np.linalg.eigvalsh(X)[0] > -1e-7
    assert np.allclose(X, S.value, atol=1e-4)


def test_program_validation():
    with pytest.raises(ValueError):
        ConicProgram(2, np.zeros(2), P=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ValueError):
        ConicProgram(2, np.zeros(3))
    with pytest.raises(ValueError):
        ConicProgram(2, np.zeros(2), G=np.ones((1, 2)))
