"""Linear solvers for the reduced Newton system of the interior-point method.

Both solve ``(P + G' W^-2 G) dx + A' dy = r``, ``A dx = r_y``.

``DenseKKT`` assembles the matrix. ``LowRankKKT`` is for large problems
whose Hessian is diagonal apart from a few dense rows: simple bounds, norm
balls over plain variables and a short list of general inequality rows. It
applies the Woodbury identity so the factorization is only as large as the
number of general rows.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .cones import Dims, Scaling

REFINE_STEPS = 2


class DenseKKT:
    """Dense Newton solver.

    By default the reduced normal equations are factored with Cholesky;
    the caller's iterative refinement recovers the accuracy lost to their
    conditioning. With ``augmented`` the scaled augmented form
    ``[[P, (W^-1 G)', A'], [W^-1 G, -I, 0], [A, 0, 0]]`` is factored with LU
    instead, which is slower but stays well conditioned when constraints
    become strongly active.
    """

    def __init__(self, P, G: sp.csr_matrix, A, dims: Dims, reg: float = 1e-11, augmented: bool = False):
        self.P = P
        self.G = G
        self.GT = G.T.tocsr() if sp.issparse(G) else G.T
        self.Gd = G.toarray()
        self.A = A
        self.dims = dims
        self.nv = G.shape[1]
        self.me = 0 if A is None else A.shape[0]
        self.reg = reg
        # singleton orthant rows (simple bounds) only add a diagonal term and
        # are folded into the (1,1) block of the augmented system
        nnz = np.diff(G.indptr[: dims.l + 1])
        single = np.flatnonzero(nnz == 1)
        self.s_rows = single
        self.s_cols = G.indices[G.indptr[single]]
        self.s_vals = G.data[G.indptr[single]]
        keep = np.ones(G.shape[0], dtype=bool)
        keep[single] = False
        self.keep = np.flatnonzero(keep)
        self.augmented = augmented
        # the shift follows the problem data, not the current Hessian: the
        # cone scaling blows up near the boundary and a proportional shift
        # would swamp the well-scaled directions
        pmax = 0.0 if P is None else float(np.abs(P).max(initial=0.0))
        amax = 0.0 if A is None else float(np.abs(A).max(initial=0.0))
        gmax = float(np.abs(self.Gd).max(initial=0.0))
        self.shift = reg * max(1.0, pmax, gmax**2, amax**2)

    def _pmat(self):
        if self.P is None:
            return np.zeros((self.nv, self.nv))
        return np.diag(self.P) if self.P.ndim == 1 else self.P.copy()

    def _hess(self, W: Scaling):
        M = W.apply_inv_cols(self.Gd)
        H = M.T @ M
        if self.P is not None:
            if self.P.ndim == 1:
                H[np.diag_indices_from(H)] += self.P
            else:
                H += self.P
        return H

    def factor(self, W: Scaling) -> None:
        self.W = W
        if self.augmented:
            self._factor_augmented(W)
            return
        H = self._hess(W)
        self.H = H
        r = self.shift
        if self.A is None:
            try:
                self.cho = la.cho_factor(H + r * np.eye(self.nv), check_finite=False)
                self.lu = None
                return
            except la.LinAlgError:
                K = H + r * np.eye(self.nv)
        else:
            me = self.me
            K = np.block([[H + r * np.eye(self.nv), self.A.T], [self.A, -r * np.eye(me)]])
        self.cho = None
        self.lu = la.lu_factor(K, check_finite=False)

    def _factor_augmented(self, W: Scaling) -> None:
        nv, me = self.nv, self.me
        keep = self.keep
        mz = keep.size
        M = W.apply_inv_cols(self.Gd)[keep]
        P = self._pmat()
        d2 = W.d[self.s_rows] ** 2
        np.add.at(P, (self.s_cols, self.s_cols), self.s_vals**2 / d2)
        r = self.shift
        K = np.zeros((nv + mz + me, nv + mz + me))
        K[:nv, :nv] = P + r * np.eye(nv)
        K[:nv, nv: nv + mz] = M.T
        K[nv: nv + mz, :nv] = M
        K[nv: nv + mz, nv: nv + mz] = -np.eye(mz)
        if me:
            K[:nv, nv + mz:] = self.A.T
            K[nv + mz:, :nv] = self.A
            K[nv + mz:, nv + mz:] = -r * np.eye(me)
        self.lu = la.lu_factor(K, check_finite=False)

    def _solve_raw(self, rx, ry):
        if self.cho is not None:
            return la.cho_solve(self.cho, rx, check_finite=False), np.zeros(0)
        rhs = rx if self.A is None else np.concatenate([rx, ry])
        sol = la.lu_solve(self.lu, rhs, check_finite=False)
        return sol[: self.nv], sol[self.nv:]

    def _apply(self, dx, dy):
        out_x = self.H @ dx
        if self.A is None:
            return out_x, np.zeros(0)
        return out_x + self.A.T @ dy, self.A @ dx

    def solve_reduced(self, rx, ry):
        dx, dy = self._solve_raw(rx, ry)
        for _ in range(REFINE_STEPS):
            ex, ey = self._apply(dx, dy)
            cx, cy = self._solve_raw(rx - ex, ry - ey)
            dx += cx
            if dy.size:
                dy += cy
        return dx, dy

    def solve(self, bx, by, bz):
        W = self.W
        if self.augmented:
            nv, keep = self.nv, self.keep
            mz = keep.size
            wbz = W.apply_inv(bz)
            d = W.d[self.s_rows]
            rx = bx.copy()
            np.add.at(rx, self.s_cols, self.s_vals * wbz[self.s_rows] / d)
            rhs = np.concatenate([rx, wbz[keep], by if self.me else np.zeros(0)])
            sol = la.lu_solve(self.lu, rhs, check_finite=False)
            dx = sol[:nv]
            t = np.empty(bz.size)
            t[keep] = sol[nv: nv + mz]
            t[self.s_rows] = (self.s_vals * dx[self.s_cols] - bz[self.s_rows]) / d
            return dx, sol[nv + mz:], W.apply_inv(t)
        wbz = W.apply_inv(W.apply_inv(bz))
        dx, dy = self.solve_reduced(bx + self.GT @ wbz, by)
        dz = W.apply_inv(W.apply_inv(self.G @ dx - bz))
        return dx, dy, dz


class LowRankKKT:
    """Woodbury solver; see :meth:`LowRankKKT.layout` for the structure."""

    def __init__(self, P, G: sp.csr_matrix, dims: Dims, layout):
        self.P = np.zeros(G.shape[1]) if P is None else P
        self.G = G
        self.GT = G.T.tocsr() if sp.issparse(G) else G.T
        self.dims = dims
        self.nv = G.shape[1]
        single, general, balls = layout
        self.s_rows, self.s_cols, self.s_vals = single
        self.g_rows = general
        Gl = G[general]
        self.Gg = Gl.toarray()
        self.balls = balls

    @staticmethod
    def layout(P, G: sp.csr_matrix, dims: Dims):
        """Row classification, or ``None`` if the structure does not apply."""
        if P is not None and P.ndim != 1:
            return None
        Gl = G[: dims.l]
        nnz = np.diff(Gl.indptr)
        single_rows = np.flatnonzero(nnz == 1)
        general = np.flatnonzero(nnz > 1)
        s_cols = Gl.indices[Gl.indptr[single_rows]]
        s_vals = Gl.data[Gl.indptr[single_rows]]
        balls = []
        for k, (a, b) in enumerate(dims.blocks()):
            blk = G[a:b]
            if blk.indptr[1] != blk.indptr[0]:
                return None
            body = blk[1:]
            if (np.diff(body.indptr) != 1).any():
                return None
            cols = body.indices
            vals = body.data
            if np.unique(cols).size != cols.size or not np.allclose(np.abs(vals), abs(vals[0])):
                return None
            balls.append((k, cols, abs(vals[0])))
        diag = np.zeros(G.shape[1]) if P is None else P.copy()
        diag[s_cols] += 1.0
        for _, cols, _ in balls:
            diag[cols] += 1.0
        if (diag <= 0).any():
            return None
        return (single_rows, s_cols, s_vals), general, balls

    def factor(self, W: Scaling) -> None:
        self.W = W
        dlp = 1.0 / W.d**2
        diag = self.P.copy()
        np.add.at(diag, self.s_cols, self.s_vals**2 * dlp[self.s_rows])
        cols_u = [self.Gg.T]
        cvals = [dlp[self.g_rows]]
        for k, cols, sig in self.balls:
            eta, _ = W.socs[k]
            w = W.points[k]
            diag[cols] += sig**2 / eta**2
            u = np.zeros(self.nv)
            u[cols] = w[1:] * (sig * np.sqrt(2.0) / eta)
            cols_u.append(u[:, None])
            cvals.append(np.ones(1))
        self.diag = diag
        # fold the weights into the columns: diag + V V', V = U sqrt(c)
        V = np.hstack(cols_u) * np.sqrt(np.concatenate(cvals))
        self.V = V
        DV = V / diag[:, None]
        self.DV = DV
        S = V.T @ DV
        S[np.diag_indices_from(S)] += 1.0
        self.cho = la.cho_factor(S, check_finite=False) if S.shape[0] else None

    def _solve_raw(self, r):
        y = r / self.diag
        if self.cho is None:
            return y
        t = la.cho_solve(self.cho, self.V.T @ y, check_finite=False)
        return y - self.DV @ t

    def _apply(self, v):
        return self.diag * v + self.V @ (self.V.T @ v)

    def solve_reduced(self, r):
        dx = self._solve_raw(r)
        for _ in range(REFINE_STEPS):
            dx += self._solve_raw(r - self._apply(dx))
        return dx

    def solve(self, bx, by, bz):
        W = self.W
        wbz = W.apply_inv(W.apply_inv(bz))
        dx = self.solve_reduced(bx + self.GT @ wbz)
        dz = W.apply_inv(W.apply_inv(self.G @ dx - bz))
        return dx, np.zeros(0), dz
