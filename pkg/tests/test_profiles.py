import numpy as np
import pytest

from gridchase.errors import DimensionMismatch, DomainError, NonFiniteValue, SchemaError
from gridchase.grid import chain_network, random_feeder, sensitivity_matrices
from gridchase.profiles import (
    ExogenousTrace,
    InjectionProfile,
    VparBox,
    check_assumption1,
    check_assumption3,
    compute_trace,
    load_profile,
    reachable,
    save_profile,
    synth_profile,
    vpar_box,
)


def test_trace_matches_direct_sum():
    net = random_feeder(5, 2)
    m = sensitivity_matrices(net)
    prof = synth_profile(5, 12, pv_buses=[2, 4], seed=3)
    tr = compute_trace(m, prof, 144.0)
    for t in range(prof.T):
        for i in range(5):
            direct = 144.0 + 1e-6 * sum(m.R[i, j] * prof.p[t, j] + m.X[i, j] * prof.q_e[t, j] for j in range(5))
            assert tr.v_par[t, i] == pytest.approx(direct, rel=1e-14)
    assert np.allclose(tr.w, np.diff(tr.v_par, axis=0))
    assert tr.eta_hat == np.abs(tr.w).max()


def test_trace_size_mismatch():
    with pytest.raises(DimensionMismatch):
        compute_trace(sensitivity_matrices(random_feeder(4, 0)), synth_profile(5, 4), 144.0)


def test_profile_roundtrip(tmp_path):
    prof = synth_profile(4, 9, pv_buses=[1, 3], seed=5, cloud_rate=0.3, cloud_depth=0.4)
    p = tmp_path / "p.csv"
    save_profile(prof, p)
    back = load_profile(p, dt=prof.dt)
    assert np.array_equal(back.p, prof.p) and np.array_equal(back.q_e, prof.q_e)


@pytest.mark.parametrize(
    "text, exc",
    [
        ("t,bus,p,q\n0,1,1,1\n", SchemaError),
        ("t,bus,p_w,q_e_var\n", SchemaError),
        ("t,bus,p_w,q_e_var\n0,1,1,1\n1,1,1\n", SchemaError),
        ("t,bus,p_w,q_e_var\n0,1,1,1\n0,1,2,2\n", SchemaError),
        ("t,bus,p_w,q_e_var\n0,1,1,1\n1,1,nan,1\n", NonFiniteValue),
        ("t,bus,p_w,q_e_var\n0,1,x,1\n1,1,1,1\n", SchemaError),
    ],
)
def test_profile_parse_errors(tmp_path, text, exc):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(exc):
        load_profile(p)


def test_profile_validation():
    with pytest.raises(DomainError):
        InjectionProfile(1.0, np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(DimensionMismatch):
        InjectionProfile(1.0, np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(DomainError):
        synth_profile(3, 10, cloud_rate=1.5)


def test_synth_deterministic_and_short():
    a = synth_profile(6, 30, pv_buses=[3, 6], seed=7, cloud_rate=0.2, cloud_depth=0.3)
    b = synth_profile(6, 30, pv_buses=[3, 6], seed=7, cloud_rate=0.2, cloud_depth=0.3)
    assert np.array_equal(a.p, b.p)
    assert synth_profile(3, 2).T == 2
    assert synth_profile(3, 5, pv_buses=[1]).p.shape == (5, 3)


def test_assumption1():
    tr = ExogenousTrace(np.array([[0.0, 0.0], [0.5, -1.0], [0.6, -0.2]]), np.array([[0.5, -1.0], [0.1, 0.8]]))
    ok = check_assumption1(tr, 1.0)
    assert ok.ok and ok.worst == 1.0 and ok.argmax_t == 0
    bad = check_assumption1(tr, 0.9)
    assert not bad.ok and bad.reason == "noise_exceeds_eta"
    wide = check_assumption1(tr, 1.0, v_lo=np.zeros(2), v_hi=np.ones(2))
    assert not wide.ok and wide.reason == "eta_exceeds_halfwidth"


def test_reachable_against_box_geometry():
    X = np.eye(2)
    lo, hi = np.array([0.0, 0.0]), np.array([1.0, 1.0])
    q = (np.array([-0.5, -0.5]), np.array([0.5, 0.5]))
    # v_par + q must meet [0, 1] with |q| <= 0.5 per coordinate
    assert reachable(X, np.array([1.4, -0.4]), *q, lo, hi)
    assert not reachable(X, np.array([1.6, 0.0]), *q, lo, hi)


def test_assumption3_fraction():
    X = sensitivity_matrices(chain_network([0.1] * 3, [0.2] * 3)).X
    box = VparBox(np.full(3, 144.0), np.full(3, 145.0))
    ql = (np.full(3, -0.24), np.full(3, 0.24))
    vl = (np.full(3, 0.9025 * 144), np.full(3, 1.1025 * 144))
    rep = check_assumption3(box, [X, 1.1 * X], ql, vl, eta=1.0, epsilon=0.1)
    assert rep.feasible_fraction == 1.0 and rep.n_checked == 16
    far = VparBox(np.full(3, 170.0), np.full(3, 171.0))
    rep = check_assumption3(far, X, ql, vl, eta=1.0, epsilon=0.1)
    assert rep.feasible_fraction == 0.0 and len(rep.failures) == 8


def test_vpar_box():
    tr = ExogenousTrace(np.array([[1.0, 2.0], [3.0, 0.0]]), np.array([[2.0, -2.0]]))
    box = vpar_box(tr, 0.5)
    assert np.array_equal(box.lo, [0.5, -0.5]) and np.array_equal(box.hi, [3.5, 2.5])
    assert box.contains(np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        vpar_box(tr, -1.0)
