import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridchase.errors import (
    AsymmetricInput,
    CycleDetected,
    DimensionMismatch,
    DisconnectedBus,
    DuplicateChild,
    NetworkError,
    NonpositiveImpedance,
    SchemaError,
)
from gridchase.grid import (
    ZeroSensitivityWarning,
    build_network,
    chain_network,
    from_triangle_vector,
    load_network,
    network_from_dict,
    permute_buses,
    random_feeder,
    row_infnorm_bound,
    save_network,
    sensitivity_matrices,
    to_triangle_vector,
    tri_dim,
    tri_index_map,
    tri_order,
    triangle_norm,
)


def path_oracle(net):
    """Brute force: enumerate each bus's root path and sum shared lines,
    walking from the substation downwards."""
    line = {e.child: e for e in net.edges}
    paths = {}
    for b in range(1, net.n + 1):
        p, a = [], b
        while a != 0:
            p.append(a)
            a = line[a].parent
        paths[b] = p[::-1]
    R = np.zeros((net.n, net.n))
    X = np.zeros((net.n, net.n))
    for i in range(1, net.n + 1):
        for j in range(1, net.n + 1):
            shared = [a for a, c in zip(paths[i], paths[j]) if a == c]
            r = x = 0.0
            for a in shared:
                r += line[a].r
                x += line[a].x
            R[i - 1, j - 1] = 2.0 * r
            X[i - 1, j - 1] = 2.0 * x
    return R, X


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("trunk", [True, False])
def test_sensitivity_matches_path_oracle(seed, trunk):
    net = random_feeder(9, seed, trunk=trunk)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroSensitivityWarning)
        m = sensitivity_matrices(net)
    R, X = path_oracle(net)
    assert np.array_equal(m.R, R)
    assert np.array_equal(m.X, X)
    m.validate()


def test_chain_closed_form():
    x = np.array([0.1, 0.2, 0.3, 0.4])
    r = x / 2
    m = sensitivity_matrices(chain_network(r, x))
    cum = 2 * np.cumsum(x)
    idx = np.minimum.outer(np.arange(4), np.arange(4))
    assert np.allclose(m.X, cum[idx])
    assert np.allclose(m.R, m.X / 2)


def test_single_bus():
    m = sensitivity_matrices(chain_network([0.3], [0.2]))
    assert m.X.shape == (1, 1) and m.X[0, 0] == pytest.approx(0.4)


def test_zero_offdiagonal_warns():
    net = build_network([(0, 1, 0.1, 0.1), (0, 2, 0.1, 0.1)])
    with pytest.warns(ZeroSensitivityWarning):
        m = sensitivity_matrices(net)
    assert m.X[0, 1] == 0.0


@pytest.mark.parametrize(
    "edges, exc",
    [
        ([(0, 1, 0.1, 0.1), (1, 2, 0.1, 0.1), (2, 1, 0.1, 0.1)], CycleDetected),
        ([(0, 1, 0.1, 0.1), (1, 2, 0.0, 0.1)], NonpositiveImpedance),
        ([(0, 1, 0.1, 0.1), (0, 2, 0.1, 0.1), (1, 2, 0.1, 0.1)], CycleDetected),
        ([(0, 1, 0.1, 0.1), (2, 3, 0.1, 0.1)], DisconnectedBus),
        ([(0, 1, 0.1, 0.1), (1, 0, 0.1, 0.1)], CycleDetected),
        ([], NetworkError),
    ],
)
def test_invalid_networks(edges, exc):
    with pytest.raises(exc):
        build_network(edges)


def test_duplicate_parent():
    with pytest.raises(DuplicateChild):
        build_network([(0, 1, 0.1, 0.1), (1, 3, 0.1, 0.1), (2, 3, 0.1, 0.1)], n=3)


def test_network_roundtrip(tmp_path):
    net = random_feeder(7, 3)
    p = tmp_path / "net.json"
    save_network(net, p)
    assert load_network(p) == net


def test_network_schema_errors():
    doc = random_feeder(3, 0).to_dict()
    with pytest.raises(SchemaError):
        network_from_dict({**doc, "extra": 1})
    bad = json.loads(json.dumps(doc))
    bad["edges"][0]["r"] = bad["edges"][0].pop("r_ohm")
    with pytest.raises(SchemaError):
        network_from_dict(bad)
    with pytest.raises(SchemaError):
        network_from_dict({"n": 3})


def test_triangle_coordinates():
    A = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    x = to_triangle_vector(A)
    assert np.array_equal(x, [1, 2, 3, 4, 5, 6])
    assert np.array_equal(from_triangle_vector(x), A)
    assert triangle_norm(A) == pytest.approx(np.sqrt(91.0))
    assert tri_dim(55) == 1540 and tri_order(1540) == 55
    T = tri_index_map(3)
    assert T[2, 0] == T[0, 2] == 2
    with pytest.raises(DimensionMismatch):
        tri_order(5)
    with pytest.raises(DimensionMismatch):
        from_triangle_vector(x, 4)
    with pytest.raises(AsymmetricInput):
        to_triangle_vector(A + np.triu(np.ones((3, 3)), 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_infnorm_bound(n, seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(n, n))
    D = D + D.T
    b = rng.normal(size=n)
    assert row_infnorm_bound(D, b) <= triangle_norm(D) * np.linalg.norm(b) * (1 + 1e-12)


def test_permute_buses():
    X = sensitivity_matrices(random_feeder(5, 1)).X
    perm = np.array([4, 2, 0, 1, 3])
    P = permute_buses(X, perm)
    assert P[1, 3] == X[2, 1]
    assert triangle_norm(P) == pytest.approx(triangle_norm(X))
