"""Factorisation of the joint-model precision.

The posterior precision has an arrow shape: a block diagonal of 2x2 blocks
``D_i`` (one per loan's random effects), a dense border ``B`` coupling each
loan to the global block, and a dense global block ``C``::

    Q = [[D, B],
         [B', C]]

With ``D = L_D L_D'`` and ``K = L_D^-1 B`` the global Schur complement is
``S = C - K'K`` and ``Q = L L'`` with ``L = [[L_D, 0], [K', L_S]]``.
Linear constraints act on the global block only.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import NotPositiveDefiniteError
from .gmrf import cholesky_lower


class ArrowFactor:
    """Cholesky factor of an arrow-structured precision with constraints.

    Args:
        D: (N, 2, 2) per-loan diagonal blocks.
        B: (2N, G) border.
        C: (G, G) global block.
        A: (k, G) constraint rows on the global block (may have k = 0).
    """

    def __init__(self, D: np.ndarray, B: np.ndarray, C: np.ndarray, A: np.ndarray):
        d00, d01, d11 = D[:, 0, 0], D[:, 0, 1], D[:, 1, 1]
        bad = np.flatnonzero(~(d00 > 0))
        if bad.size:
            raise NotPositiveDefiniteError(int(2 * bad[0]))
        l11 = np.sqrt(d00)
        l21 = d01 / l11
        r = d11 - l21**2
        bad = np.flatnonzero(~(r > 0))
        if bad.size:
            raise NotPositiveDefiniteError(int(2 * bad[0] + 1))
        self.l11, self.l21, self.l22 = l11, l21, np.sqrt(r)
        self.N = len(l11)
        self.G = C.shape[0]
        Bv = B.reshape(self.N, 2, self.G)
        k0 = Bv[:, 0, :] / l11[:, None]
        k1 = (Bv[:, 1, :] - self.l21[:, None] * k0) / self.l22[:, None]
        self.K = np.stack([k0, k1], axis=1).reshape(2 * self.N, self.G)
        S = C - self.K.T @ self.K
        try:
            self.LS = cholesky_lower(S)
        except NotPositiveDefiniteError as err:
            raise NotPositiveDefiniteError(2 * self.N + err.pivot) from None
        self.logdet = 2 * np.sum(np.log(l11) + np.log(self.l22)) + 2 * np.sum(np.log(np.diag(self.LS)))
        self.A = A
        self.k = A.shape[0]
        if self.k:
            self.W = self.solve_global(A.T)  # S^-1 A'
            M = A @ self.W
            self.LM = cholesky_lower(0.5 * (M + M.T))
            self.logdet_AQA = 2 * np.sum(np.log(np.diag(self.LM)))
            self.logdet_AA = np.linalg.slogdet(A @ A.T)[1]
        else:
            self.W = np.zeros((self.G, 0))
            self.logdet_AQA = self.logdet_AA = 0.0

    # -- triangular pieces -------------------------------------------------
    def _LD_solve(self, x: np.ndarray) -> np.ndarray:
        """L_D^-1 x for x of shape (2N, ...)."""
        xv = x.reshape((self.N, 2) + x.shape[1:])
        ext = (slice(None),) + (None,) * (x.ndim - 1)
        w0 = xv[:, 0] / self.l11[ext]
        w1 = (xv[:, 1] - self.l21[ext] * w0) / self.l22[ext]
        return np.stack([w0, w1], axis=1).reshape(x.shape)

    def _LDT_solve(self, x: np.ndarray) -> np.ndarray:
        """L_D^-T x."""
        xv = x.reshape((self.N, 2) + x.shape[1:])
        ext = (slice(None),) + (None,) * (x.ndim - 1)
        u1 = xv[:, 1] / self.l22[ext]
        u0 = (xv[:, 0] - self.l21[ext] * u1) / self.l11[ext]
        return np.stack([u0, u1], axis=1).reshape(x.shape)

    def solve_global(self, r: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.LS, True), r)

    # -- public API -------------------------------------------------------
    def solve(self, rU: np.ndarray, rg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unconstrained solve of Q x = r."""
        w = self._LD_solve(rU)
        xg = self.solve_global(rg - self.K.T @ w)
        xU = self._LDT_solve(w - self.K @ xg)
        return xU, xg

    def constrain(self, xU: np.ndarray, xg: np.ndarray, rhs: np.ndarray | None = None):
        """Conditioning by kriging onto ``A x_g = rhs``.

        Works for single vectors (xU: (2N,), xg: (G,)) and for column stacks
        (xU: (2N, n), xg: (G, n)).
        """
        if not self.k:
            return xU, xg
        res = self.A @ xg
        if rhs is not None:
            res = res - (rhs if res.ndim == 1 else rhs[:, None])
        coef = linalg.cho_solve((self.LM, True), res)
        cg = self.W @ coef
        cU = -self._LDT_solve(self.K @ cg)
        return xU - cU, xg - cg

    def sample(self, n: int, rng: np.random.Generator, with_U: bool = True):
        """Zero-mean constrained draws; returns (xU (2N, n) or None, xg (G, n))."""
        zg = rng.standard_normal((self.G, n))
        xg = linalg.solve_triangular(self.LS, zg, lower=True, trans="T")
        xU = None
        if with_U:
            zU = rng.standard_normal((2 * self.N, n))
            xU = self._LDT_solve(zU - self.K @ xg)
        if self.k:
            coef = linalg.cho_solve((self.LM, True), self.A @ xg)
            cg = self.W @ coef
            xg = xg - cg
            if with_U:
                xU = xU + self._LDT_solve(self.K @ cg)
        return xU, xg

    def quad(self, xU: np.ndarray, xg: np.ndarray) -> float:
        """x' Q x via the factor."""
        a = self.l11 * xU[0::2] + self.l21 * xU[1::2]
        b = self.l22 * xU[1::2]
        top = np.empty_like(xU)
        top[0::2], top[1::2] = a, b
        top = top + self.K @ xg
        bot = self.LS.T @ xg
        return float(top @ top + bot @ bot)

    def global_cov(self) -> np.ndarray:
        """Constrained covariance of the global block."""
        Sinv = linalg.cho_solve((self.LS, True), np.eye(self.G))
        if self.k:
            V = linalg.solve_triangular(self.LM, self.W.T, lower=True)
            Sinv = Sinv - V.T @ V
        return Sinv

    def constrained_logdet(self) -> float:
        """log det of the precision restricted to the constraint subspace."""
        return self.logdet + self.logdet_AQA - self.logdet_AA

    def loan_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-loan (L_D, K) pieces for conditional U_i | global computations."""
        return np.stack([self.l11, self.l21, self.l22], axis=1), self.K
