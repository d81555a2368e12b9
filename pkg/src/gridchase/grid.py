"""Radial network topology, sensitivity matrices and triangle coordinates.

Buses are integers ``0..n`` with bus 0 the substation. Matrices indexed by
bus live in ``n x n`` arrays where row ``i`` belongs to bus ``i + 1``.

Symmetric matrices are mapped to ``R^m`` (``m = n(n+1)/2``) by stacking the
upper triangle row by row. The Euclidean norm of that vector is the
triangle norm used throughout the model-chasing code.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    AsymmetricInput,
    CycleDetected,
    DimensionMismatch,
    DisconnectedBus,
    DuplicateChild,
    NetworkError,
    NonpositiveImpedance,
    SchemaError,
)

SYMMETRY_TOL = 1e-9


class ZeroSensitivityWarning(UserWarning):
    """Raised when a sensitivity matrix has zero off-diagonal entries."""


@dataclass(frozen=True)
class Line:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True)
class RadialNetwork:
    n: int
    edges: tuple[Line, ...]
    controllable: frozenset[int] = field(default_factory=frozenset)

    @property
    def parent(self) -> NDArray[np.int64]:
        """Parent bus of every bus; ``parent[0] == -1``."""
        par = np.full(self.n + 1, -1, dtype=np.int64)
        for e in self.edges:
            par[e.child] = e.parent
        return par

    def controllable_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.n, dtype=bool)
        for b in self.controllable:
            mask[b - 1] = True
        return mask

    def with_reactances(self, x: Sequence[float]) -> "RadialNetwork":
        """Copy of the network with line reactances replaced (edge order)."""
        lines = tuple(Line(e.parent, e.child, e.r, float(xi)) for e, xi in zip(self.edges, x))
        return RadialNetwork(self.n, lines, self.controllable)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "edges": [
                {"from": e.parent, "to": e.child, "r_ohm": e.r, "x_ohm": e.x}
                for e in self.edges
            ],
            "controllable": sorted(self.controllable),
        }


@dataclass(frozen=True)
class SensitivityModel:
    R: NDArray[np.float64]
    X: NDArray[np.float64]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def validate(self) -> None:
        for name, M in (("R", self.R), ("X", self.X)):
            if not np.allclose(M, M.T, atol=SYMMETRY_TOL, rtol=0.0):
                raise AsymmetricInput(f"{name} is not symmetric")
            if (M < 0).any():
                raise ValueError(f"{name} has negative entries")
            if (np.diag(M) <= 0).any():
                raise ValueError(f"{name} has a nonpositive diagonal")
            np.linalg.cholesky(M)


def _union_find_cycle(n_nodes: int, pairs: Iterable[tuple[int, int]]) -> bool:
    root = list(range(n_nodes))

    def find(a: int) -> int:
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra == rb:
            return True
        root[ra] = rb
    return False


def build_network(
    edges: Sequence[tuple[int, int, float, float]],
    controllable: Iterable[int] = (),
    n: int | None = None,
) -> RadialNetwork:
    """Validate an edge list ``(parent, child, r, x)`` and build the network.

    ``n`` defaults to the largest bus id in the edge list.
    """
    if len(edges) == 0:
        raise NetworkError("edge list is empty")
    ids = [int(e[0]) for e in edges] + [int(e[1]) for e in edges]
    if min(ids) < 0:
        raise NetworkError("bus ids must be nonnegative")
    if n is None:
        n = max(ids)
    if max(ids) > n:
        raise NetworkError(f"bus id {max(ids)} exceeds declared n={n}")

    for p, c, r, x in edges:
        if not (r > 0 and x > 0):
            raise NonpositiveImpedance(f"line {p}->{c} has r={r}, x={x}")
    if _union_find_cycle(n + 1, ((int(p), int(c)) for p, c, _, _ in edges)):
        raise CycleDetected("edge set contains a cycle")

    seen: set[int] = set()
    for p, c, _, _ in edges:
        if c == 0:
            raise DuplicateChild("the substation cannot be a child")
        if c in seen:
            raise DuplicateChild(f"bus {c} has more than one parent")
        seen.add(c)
    if len(edges) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        raise DisconnectedBus(f"buses {missing} are not connected to the substation")

    ctrl = frozenset(int(b) for b in controllable)
    if ctrl and (min(ctrl) < 1 or max(ctrl) > n):
        raise NetworkError("controllable buses must lie in 1..n")
    lines = tuple(Line(int(p), int(c), float(r), float(x)) for p, c, r, x in edges)
    return RadialNetwork(n, lines, ctrl)


_NETWORK_KEYS = {"n", "edges", "controllable"}
_EDGE_KEYS = {"from", "to", "r_ohm", "x_ohm"}


def network_from_dict(doc: dict) -> RadialNetwork:
    extra = set(doc) - _NETWORK_KEYS
    if extra:
        raise SchemaError(f"unknown keys in network file: {sorted(extra)}")
    if "edges" not in doc or "n" not in doc:
        raise SchemaError("network file needs 'n' and 'edges'")
    edges = []
    for e in doc["edges"]:
        if set(e) != _EDGE_KEYS:
            raise SchemaError(f"edge entries need exactly {sorted(_EDGE_KEYS)}, got {sorted(e)}")
        edges.append((e["from"], e["to"], e["r_ohm"], e["x_ohm"]))
    return build_network(edges, doc.get("controllable", []), n=int(doc["n"]))


def load_network(path: str | Path) -> RadialNetwork:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def save_network(net: RadialNetwork, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh, indent=2)
        fh.write("\n")


def chain_network(r: Sequence[float], x: Sequence[float], controllable: Iterable[int] | None = None) -> RadialNetwork:
    n = len(r)
    edges = [(i, i + 1, r[i], x[i]) for i in range(n)]
    ctrl = range(1, n + 1) if controllable is None else controllable
    return build_network(edges, ctrl, n=n)


def random_feeder(
    n: int,
    seed: int,
    r_range: tuple[float, float] = (0.05, 0.4),
    x_range: tuple[float, float] = (0.05, 0.4),
    trunk: bool = True,
) -> RadialNetwork:
    """Random radial feeder. With ``trunk`` the substation feeds bus 1 only.

    New buses attach preferentially to recently added buses, which gives the
    long laterals typical of distribution feeders.
    """
    if n < 1:
        raise NetworkError("n must be at least 1")
    rng = np.random.default_rng(seed)
    edges = []
    for child in range(1, n + 1):
        if child == 1 or not trunk and rng.random() < 0.1:
            parent = 0
        else:
            lo = 1 if trunk else 0
            # geometric preference for the most recent buses
            back = min(int(rng.geometric(0.35)), child - lo)
            parent = child - back
        r = rng.uniform(*r_range)
        x = rng.uniform(*x_range)
        edges.append((parent, child, r, x))
    return build_network(edges, range(1, n + 1), n=n)


def _depths(parent: NDArray[np.int64]) -> NDArray[np.int64]:
    depth = np.zeros(parent.size, dtype=np.int64)
    for b in range(1, parent.size):
        d, a = 0, b
        while a != 0:
            a = parent[a]
            d += 1
        depth[b] = d
    return depth


def _lca(a: int, b: int, parent: NDArray[np.int64], depth: NDArray[np.int64]) -> int:
    while depth[a] > depth[b]:
        a = parent[a]
    while depth[b] > depth[a]:
        b = parent[b]
    while a != b:
        a, b = parent[a], parent[b]
    return a


def sensitivity_matrices(net: RadialNetwork, warn: bool = True) -> SensitivityModel:
    """R and X from shared root-path impedance: entry (i, j) is twice the
    cumulative impedance from the substation to the lowest common ancestor
    of buses i and j."""
    parent = net.parent
    depth = _depths(parent)
    r_in = np.zeros(net.n + 1)
    x_in = np.zeros(net.n + 1)
    for e in net.edges:
        r_in[e.child] = e.r
        x_in[e.child] = e.x
    # prefix sums in depth order so parents are done first
    pr = np.zeros(net.n + 1)
    px = np.zeros(net.n + 1)
    for b in np.argsort(depth, kind="stable"):
        if b:
            pr[b] = pr[parent[b]] + r_in[b]
            px[b] = px[parent[b]] + x_in[b]

    n = net.n
    R = np.empty((n, n))
    X = np.empty((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            a = i if i == j else _lca(i, j, parent, depth)
            R[i - 1, j - 1] = R[j - 1, i - 1] = 2.0 * pr[a]
            X[i - 1, j - 1] = X[j - 1, i - 1] = 2.0 * px[a]
    if warn and n > 1 and (X[~np.eye(n, dtype=bool)] == 0).any():
        warnings.warn(
            "sensitivity matrices have zero off-diagonal entries "
            "(buses on different substation branches)",
            ZeroSensitivityWarning,
            stacklevel=2,
        )
    return SensitivityModel(R, X)


# -- triangle coordinates ---------------------------------------------------


def tri_dim(n: int) -> int:
    return n * (n + 1) // 2


def tri_order(m: int) -> int:
    n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if tri_dim(n) != m:
        raise DimensionMismatch(f"{m} is not a triangular number")
    return n


@lru_cache(maxsize=64)
def tri_index_map(n: int) -> NDArray[np.int64]:
    """``T[i, j]`` is the triangle coordinate holding entry (i, j)."""
    iu, ju = np.triu_indices(n)
    T = np.empty((n, n), dtype=np.int64)
    k = np.arange(iu.size)
    T[iu, ju] = k
    T[ju, iu] = k
    T.setflags(write=False)
    return T


def check_symmetric(A: NDArray[np.float64], tol: float = SYMMETRY_TOL) -> NDArray[np.float64]:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if np.abs(A - A.T).max(initial=0.0) > tol:
        raise AsymmetricInput("matrix is not symmetric within tolerance")
    return A


def to_triangle_vector(A: NDArray[np.float64]) -> NDArray[np.float64]:
    A = check_symmetric(A)
    return A[np.triu_indices(A.shape[0])].copy()


def from_triangle_vector(x: NDArray[np.float64], n: int | None = None) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=float)
    if n is None:
        n = tri_order(x.size)
    elif x.size != tri_dim(n):
        raise DimensionMismatch(f"vector of length {x.size} does not match n={n}")
    return x[tri_index_map(n)]


def triangle_norm(A: NDArray[np.float64]) -> float:
    A = check_symmetric(A)
    return float(np.sqrt(np.sum(np.triu(A) ** 2)))


def row_infnorm_bound(A: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    """Exact ``||A b||_inf``; bounded above by ``triangle_norm(A) * ||b||_2``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or b.ndim != 1 or A.shape[1] != b.size:
        raise DimensionMismatch(f"cannot multiply {A.shape} by {b.shape}")
    return float(np.abs(A @ b).max(initial=0.0))


def permute_buses(M: NDArray[np.float64], perm: NDArray[np.int64]) -> NDArray[np.float64]:
    """Simultaneous row/column permutation ``M[perm][:, perm]``."""
    return M[np.ix_(perm, perm)]
