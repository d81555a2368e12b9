"""Acceptance criteria, one test each. Every test prints a single
``ACCEPTANCE k: PASS|FAIL ...`` line; the lines are repeated in the
terminal summary."""

import time

import cvxpy as cp
import numpy as np

from conftest import report
from test_grid import path_oracle
from test_oracle import reference_oracle
from gridchase.baselines import Kind
from gridchase.cbc import (
    ObservationStore,
    UncertaintySet,
    full_view,
    init_estimate,
    membership,
    sel_project,
)
from gridchase.cli import main
from gridchase.config import build_experiment, load_config
from gridchase.controller import post_warmup_violation_rate, run_episode
from gridchase.grid import (
    build_network,
    random_feeder,
    sensitivity_matrices,
    to_triangle_vector,
    triangle_norm,
)
from gridchase.oracle import SafetyEnvelope, Stage, robustness_certificate, solve_oracle, verify_solution
from gridchase.profiles import VparBox, check_assumption3

TIGHT = dict(tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)


def test_rho_arithmetic(capsys):
    t0 = time.perf_counter()
    rc = main(["bound", "--n", "55", "--epsilon", "0.1", "--q-range", "0.48"])
    elapsed = time.perf_counter() - t0
    vals = dict(line.split() for line in capsys.readouterr().out.splitlines())
    r = float(vals["rho"])
    ok = rc == 0 and abs(r - 0.01404) <= 1e-4 and elapsed < 1.0
    with capsys.disabled():
        report(1, ok, f"rho={r:.6f} (target 0.01404 +- 1e-4) in {elapsed:.3f}s")
    assert ok


def random_tree(n, rng):
    """Uniform random recursive tree or a feeder-style tree."""
    if rng.random() < 0.5:
        return random_feeder(n, int(rng.integers(2**31)), trunk=bool(rng.random() < 0.5))
    edges = [(int(rng.integers(0, c)), c, rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0)) for c in range(1, n + 1)]
    return build_network(edges, range(1, n + 1), n=n)


def test_sensitivity_oracle(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    exact = chol = 0
    for _ in range(200):
        net = random_tree(int(rng.integers(1, 11)), rng)
        m = sensitivity_matrices(net, warn=False)
        R, X = path_oracle(net)
        exact += bool(np.array_equal(m.R, R) and np.array_equal(m.X, X))
        try:
            np.linalg.cholesky(m.R)
            np.linalg.cholesky(m.X)
            chol += 1
        except np.linalg.LinAlgError:
            pass
    elapsed = time.perf_counter() - t0
    ok = exact == 200 and chol == 200 and elapsed < 10.0
    with capsys.disabled():
        report(2, ok, f"{exact}/200 exact, {chol}/200 Cholesky in {elapsed:.2f}s")
    assert ok


def screened_instance(rng):
    """Random small instance whose estimate is consistent with the data and
    meets the steerability check on every box corner; ``None`` otherwise."""
    n = int(rng.integers(3, 9))
    seed = int(rng.integers(2**31))
    net = random_feeder(n, seed)
    Xs = sensitivity_matrices(net, warn=False).X
    eta = 1.0
    env = SafetyEnvelope.standard(n, eta=eta)
    uset = UncertaintySet.around(Xs, 0.5)
    store = ObservationStore(n)
    vpar = env.v_nom + rng.uniform(-6, 6) + rng.normal(size=n)
    qc = np.zeros(n)
    v = vpar + Xs @ qc
    trace = [vpar.copy()]
    for _ in range(int(rng.integers(5, 15))):
        u = np.clip(qc + rng.normal(size=n) * 0.1, env.q_lo, env.q_hi) - qc
        w = rng.uniform(-eta, eta, n)
        vpar = vpar + w
        trace.append(vpar.copy())
        qc = qc + u
        v_next = v + Xs @ u + w
        store.append(v, v_next, u, qc)
        v = v_next
    trace = np.array(trace)
    box = VparBox(trace.min(axis=0), trace.max(axis=0))
    start = init_estimate(net, 0.5, False, 0.5, seed, X_star=Xs)
    X_hat = sel_project(start, full_view(store, uset, box, eta)).X
    if not membership(X_hat, store, uset, box, eta, tol=1e-7):
        return None
    a3 = check_assumption3(box, X_hat, (env.q_lo, env.q_hi), (env.v_lo, env.v_hi), eta, env.epsilon,
                           n_mc=2**n, seed=seed)
    if a3.feasible_fraction < 1.0:
        return None
    return X_hat, v, qc, env


def test_oracle_robustness(capsys):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    strict = violations = accepted = tried = 0
    while accepted < 50 and tried < 500:
        tried += 1
        inst = screened_instance(rng)
        if inst is None:
            continue
        accepted += 1
        X_hat, v, qc, env = inst
        sol = solve_oracle(X_hat, v, qc, env)
        if sol.stage is not Stage.STRICT:
            continue
        strict += 1
        cert = robustness_certificate(X_hat, sol, env, n_mc=1000, seed=accepted, tol=1e-6)
        violations += cert.violations
    elapsed = time.perf_counter() - t0
    ok = accepted == 50 and strict == 50 and violations == 0 and elapsed < 120.0
    with capsys.disabled():
        report(3, ok, f"strict {strict}/{accepted} (screened from {tried}), "
                      f"{violations} certificate violations in {elapsed:.1f}s")
    assert ok


def min_slack_prefix(view, Y, k):
    """Smallest slack over the first ``k`` tuples (``+inf`` when empty)."""
    if k == 0:
        return np.inf
    return float(view.slacks(Y)[:k].min())


def test_chasing_invariants(capsys):
    exp = build_experiment(load_config(preset="moderate"))
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    member_fail = mono_fail = nest_fail = 0
    worst_rise = -np.inf
    for seed in range(20):
        lg = run_episode(exp.episode(kind=Kind.PI_PLUS_SEL, seed=seed), keep_estimates=True)
        eta = exp.env.eta
        view = full_view(lg.store, lg.uset, lg.box, eta)
        # (i) the truth meets every row of every prefix; step t uses the
        # first t - 1 tuples
        per_tuple = view.slacks(lg.X_star).min(axis=(1, 2))
        bad_prefix = np.minimum.accumulate(per_tuple) < -1e-8
        member_fail += int(bad_prefix[: lg.T - 1].sum()) + (0 if lg.uset.contains(lg.X_star) else lg.T)
        # (ii) distance to the truth never grows
        rise = np.diff(lg.model_err)
        worst_rise = max(worst_rise, float(rise.max()))
        mono_fail += int((rise > 1e-7).sum())
        # (iii) later consistent sets sit inside earlier ones: rows are
        # inherited and any model admitted later was admitted before
        for _ in range(100):
            s, t = sorted(rng.integers(0, lg.T, size=2))
            early, late = lg.store.prefix(s), lg.store.prefix(t)
            if not all(np.array_equal(a, b[:s]) for a, b in zip(early.arrays(), late.arrays())):
                nest_fail += 1
                continue
            D = rng.normal(size=lg.X_star.shape)
            D = D + D.T
            D *= rng.uniform(0, lg.uset.radius) / triangle_norm(D)
            for Y in (lg.X_star, lg.estimates[s], lg.estimates[t], np.maximum(lg.X_star + D, 0.0)):
                if min_slack_prefix(view, Y, t) > min_slack_prefix(view, Y, s):
                    nest_fail += 1
    elapsed = time.perf_counter() - t0
    ok = member_fail == 0 and mono_fail == 0 and nest_fail == 0 and elapsed < 300.0
    with capsys.disabled():
        report(4, ok, f"membership failures {member_fail}, monotonicity failures {mono_fail} "
                      f"(largest rise {worst_rise:.2e}), nestedness failures {nest_fail}, 20 episodes "
                      f"in {elapsed:.1f}s")
    assert ok


def test_end_to_end(capsys):
    full = build_experiment(load_config(preset="large"))
    po = build_experiment(load_config(preset="large-po"))
    t0 = time.perf_counter()
    rows = []
    for seed in range(4):
        sel = run_episode(full.episode(kind=Kind.PI_PLUS_SEL, seed=seed))
        fixed = run_episode(full.episode(kind=Kind.PI_FIXED, seed=seed))
        hidden = run_episode(po.episode(kind=Kind.PI_PLUS_SEL, seed=seed))
        start, rate = post_warmup_violation_rate(sel, sel.header["diam"])
        rows.append((seed, sel.header["mistakes"], fixed.header["mistakes"], hidden.header["mistakes"], start, rate))
    elapsed = time.perf_counter() - t0
    better = all(r[1] < r[2] for r in rows)
    calm = all(r[5] <= 0.01 for r in rows)
    m_full = sum(r[1] for r in rows)
    m_po = sum(r[3] for r in rows)
    mild = m_po <= 2 * m_full
    ok = better and calm and mild and elapsed < 900.0
    detail = "; ".join(f"seed {s}: sel {a} fixed {b} po {c} warmup->{w} rate {x:.3f}" for s, a, b, c, w, x in rows)
    with capsys.disabled():
        report(5, ok, f"{detail}; po/full {m_po}/{m_full} in {elapsed:.0f}s")
    assert ok


def sel_instance(rng):
    n = int(rng.integers(3, 9))
    seed = int(rng.integers(2**31))
    net = random_feeder(n, seed)
    Xs = sensitivity_matrices(net, warn=False).X
    store = ObservationStore(n)
    qc = np.zeros(n)
    v = 144 + rng.normal(size=n)
    for _ in range(int(rng.integers(3, 20))):
        u = rng.normal(size=n) * 0.1
        qc = qc + u
        vn = v + Xs @ u + rng.uniform(-0.3, 0.3, n)
        store.append(v, vn, u, qc)
        v = vn
    uset = UncertaintySet.around(Xs, float(rng.uniform(0.2, 1.0)))
    box = VparBox(np.full(n, 100.0), np.full(n, 200.0))
    view = full_view(store, uset, box, 0.3)
    prev = init_estimate(net, 1.0, bool(rng.random() < 0.5), 1.0, seed, X_star=Xs)
    return prev, view


def sel_reference(prev, view):
    x0 = to_triangle_vector(prev)
    G, h = view.rows(np.flatnonzero(np.isfinite(view.slacks(view.uset.center).ravel())))
    x = cp.Variable(x0.size)
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(x - x0)),
                      [G.toarray() @ x <= h, x >= 0,
                       cp.norm(x - to_triangle_vector(view.uset.center)) <= view.uset.radius])
    prob.solve(solver="CLARABEL", **TIGHT)
    return prob.value


def test_solver_cross_check(capsys):
    rng = np.random.default_rng(99)
    t0 = time.perf_counter()
    sel_bad = sel_moved = pi_bad = unverified = 0
    worst = 0.0
    for _ in range(100):
        prev, view = sel_instance(rng)
        res = sel_project(prev, view)
        obj = 0.5 * res.movement**2
        ref = sel_reference(prev, view)
        sel_moved += res.solved
        rel = abs(obj - ref) / max(abs(ref), 1e-9)
        worst = max(worst, rel)
        sel_bad += rel > 1e-5
        # direct re-evaluation of every constraint at the returned point
        if view.slacks(res.X).min() < -1e-7 or not view.uset.contains(res.X, tol=1e-7):
            unverified += 1
    for k in range(100):
        n = int(rng.integers(3, 11))
        X = sensitivity_matrices(random_feeder(n, k), warn=False).X
        X_hat = np.maximum(X + 0.02 * (lambda D: D + D.T)(rng.normal(size=(n, n))), 0.0)
        env = SafetyEnvelope.standard(n, eta=float(rng.uniform(0.2, 2.0)))
        v = env.v_nom + rng.uniform(-14, 14) + rng.normal(size=n)
        qc = rng.uniform(-0.24, 0.24, n)
        sol = solve_oracle(X_hat, v, qc, env, verify=False)
        ref = reference_oracle(X_hat, v, qc, env, slack=sol.stage is Stage.SLACK)
        rel = abs(sol.objective - ref.value) / max(abs(ref.value), 1e-9)
        worst = max(worst, rel)
        pi_bad += rel > 1e-5
        if sol.report is not None and sol.report.ok:
            try:
                verify_solution(sol, X_hat, qc, env)
            except Exception:
                unverified += 1
    elapsed = time.perf_counter() - t0
    ok = sel_bad == 0 and pi_bad == 0 and unverified == 0 and elapsed < 300.0
    with capsys.disabled():
        report(6, ok, f"SEL mismatches {sel_bad}/100 ({sel_moved} moved), oracle mismatches {pi_bad}/100, "
                      f"worst relative gap {worst:.1e}, unverified {unverified} in {elapsed:.1f}s")
    assert ok


def test_determinism(tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    t0 = time.perf_counter()
    for out in outs:
        assert main(["run", "--preset", "large", "--seed", "0", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    a, b = ((o / "trajectory.csv").read_bytes() for o in outs)
    ok = a == b and len(a) > 0
    with capsys.disabled():
        report(7, ok, f"trajectory.csv identical across two runs ({len(a)} bytes) in {elapsed:.0f}s")
    assert ok
