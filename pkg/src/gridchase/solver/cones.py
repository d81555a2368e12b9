"""Cone arithmetic for the product cone R_+^l x Q^{q_1} x ... x Q^{q_k}.

Vectors are stored flat: the ``l`` nonnegative-orthant entries first, then
each second-order cone block ``(t, v)`` with ``||v|| <= t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

Vec = NDArray[np.float64]


@dataclass(frozen=True)
class Dims:
    l: int
    q: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)

    def blocks(self):
        """Yield ``(start, stop)`` of every second-order cone block."""
        start = self.l
        for k in self.q:
            yield start, start + k
            start += k


def identity(dims: Dims) -> Vec:
    e = np.zeros(dims.size)
    e[: dims.l] = 1.0
    for a, _ in dims.blocks():
        e[a] = 1.0
    return e


def jdot(u: Vec, v: Vec) -> float:
    return float(u[0] * v[0] - u[1:] @ v[1:])


def jnorm(u: Vec) -> float:
    """``sqrt(u0^2 - |u1|^2)`` evaluated without cancellation near the boundary."""
    r = float(np.linalg.norm(u[1:]))
    return float(np.sqrt(max((u[0] - r) * (u[0] + r), 0.0)))


def circ(x: Vec, y: Vec, dims: Dims) -> Vec:
    """Jordan product ``x o y``."""
    out = np.empty(dims.size)
    out[: dims.l] = x[: dims.l] * y[: dims.l]
    for a, b in dims.blocks():
        out[a] = x[a:b] @ y[a:b]
        out[a + 1 : b] = x[a] * y[a + 1 : b] + y[a] * x[a + 1 : b]
    return out


def circ_solve(lam: Vec, d: Vec, dims: Dims) -> Vec:
    """Solve ``lam o v = d`` for ``v``."""
    out = np.empty(dims.size)
    out[: dims.l] = d[: dims.l] / lam[: dims.l]
    for a, b in dims.blocks():
        l0, l1 = lam[a], lam[a + 1 : b]
        d0, d1 = d[a], d[a + 1 : b]
        v0 = (l0 * d0 - l1 @ d1) / (l0 * l0 - l1 @ l1)
        out[a] = v0
        out[a + 1 : b] = (d1 - v0 * l1) / l0
    return out


def max_step(x: Vec, d: Vec, dims: Dims) -> float:
    """Largest ``alpha >= 0`` with ``x + alpha d`` in the cone (``x`` interior).

    Returns ``inf`` when the ray never leaves the cone.
    """
    alpha = np.inf
    if dims.l:
        neg = d[: dims.l] < 0
        if neg.any():
            alpha = float(np.min(-x[: dims.l][neg] / d[: dims.l][neg]))
    for a, b in dims.blocks():
        xs, ds = x[a:b], d[a:b]
        nx = jnorm(xs)
        xb = xs / nx
        db = ds / nx
        # Lorentz boost taking xb to the cone identity, applied to db
        r0 = jdot(xb, db)
        r1 = db[1:] - ((r0 + db[0]) / (xb[0] + 1.0)) * xb[1:]
        t = np.linalg.norm(r1) - r0
        if t > 0:
            alpha = min(alpha, 1.0 / t)
    return alpha


def interior_shift(x: Vec, dims: Dims) -> float:
    """Smallest ``alpha`` such that ``x + alpha e`` lies in the cone."""
    alpha = -np.inf
    if dims.l:
        alpha = float(np.max(-x[: dims.l]))
    for a, b in dims.blocks():
        alpha = max(alpha, float(np.linalg.norm(x[a + 1 : b]) - x[a]))
    return alpha


class Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lambda``.

    ``W`` is symmetric: a positive diagonal on the orthant block and
    ``eta (2 v v^T - J)`` on each second-order cone block, where ``w`` is the
    scaling point (``W^2 = eta^2 (2 w w^T - J)``) and
    ``v = (w + e) / sqrt(2 (w_0 + 1))``.
    """

    def __init__(self, s: Vec, z: Vec, dims: Dims):
        self.dims = dims
        self.d = np.sqrt(s[: dims.l] / z[: dims.l])
        self.socs: list[tuple[float, Vec]] = []
        self.points: list[Vec] = []
        for a, b in dims.blocks():
            sa, za = s[a:b], z[a:b]
            ns = jnorm(sa)
            nz = jnorm(za)
            if not (ns > 0 and nz > 0):
                raise FloatingPointError("iterate reached the cone boundary")
            sb = sa / ns
            zb = za / nz
            gamma = np.sqrt((1.0 + sb @ zb) / 2.0)
            w = sb.copy()
            w[0] += zb[0]
            w[1:] -= zb[1:]
            w /= 2.0 * gamma
            v = w.copy()
            v[0] += 1.0
            v /= np.sqrt(2.0 * (w[0] + 1.0))
            self.socs.append((np.sqrt(ns / nz), v))
            self.points.append(w)
        self.lam = self.apply(z)

    def apply(self, v: Vec) -> Vec:
        out = np.empty_like(v)
        dims = self.dims
        out[: dims.l] = self.d * v[: dims.l]
        for (a, b), (eta, w) in zip(dims.blocks(), self.socs):
            vb = v[a:b]
            out[a:b] = 2.0 * (w @ vb) * w
            out[a] -= vb[0]
            out[a + 1 : b] += vb[1:]
            out[a:b] *= eta
        return out

    def apply_inv(self, v: Vec) -> Vec:
        out = np.empty_like(v)
        dims = self.dims
        out[: dims.l] = v[: dims.l] / self.d
        for (a, b), (eta, w) in zip(dims.blocks(), self.socs):
            vb = v[a:b]
            jw = w.copy()
            jw[1:] = -jw[1:]
            out[a:b] = 2.0 * (jw @ vb) * jw
            out[a] -= vb[0]
            out[a + 1 : b] += vb[1:]
            out[a:b] /= eta
        return out

    def apply_inv2(self, v: Vec) -> Vec:
        return self.apply_inv(self.apply_inv(v))

    def apply_inv_cols(self, M: NDArray[np.float64]) -> NDArray[np.float64]:
        """``W^{-1} M`` for a dense matrix with rows in cone order."""
        dims = self.dims
        out = np.empty_like(M)
        out[: dims.l] = M[: dims.l] / self.d[:, None]
        for (a, b), (eta, w) in zip(dims.blocks(), self.socs):
            Mb = M[a:b]
            jw = w.copy()
            jw[1:] = -jw[1:]
            out[a:b] = 2.0 * np.outer(jw, jw @ Mb)
            out[a] -= Mb[0]
            out[a + 1 : b] += Mb[1:]
            out[a:b] /= eta
        return out
