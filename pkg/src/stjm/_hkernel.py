"""Compiled per-instance kernel for h_i (Laplace and plug-in methods).

Each instance integrates over the loan's (U0, U1). With
``eta_s = oX_s + lam (U0 + U1 s)``::

    log f(U) = -(U - m)' P (U - m) / 2 - sum_{s <= t} softplus(eta_s)
    log L(U) = sum_{t < s <= t_i} [x_s eta_s - softplus(eta_s)]
    log g(U) = log f(U) - log L(U)

and ``h = Z_g / Z_f``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _eval(P, m, oX, t, ti, ev, lam, u0, u1, with_g, out):
    """Value, gradient and Hessian at (u0, u1); out = [val, g0, g1, h00, h01, h11]."""
    d0 = u0 - m[0]
    d1 = u1 - m[1]
    val = -0.5 * (P[0, 0] * d0 * d0 + 2.0 * P[0, 1] * d0 * d1 + P[1, 1] * d1 * d1)
    g0 = -(P[0, 0] * d0 + P[0, 1] * d1)
    g1 = -(P[1, 0] * d0 + P[1, 1] * d1)
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    a0 = 0.0
    a1 = 0.0
    end = ti if with_g else t
    for k in range(end):
        s = k + 1.0
        eta = oX[k] + lam * (u0 + u1 * s)
        sp = _softplus(eta)
        p = _expit(eta)
        c = p * (1.0 - p)
        if k < t:
            val -= sp
            dl = -p
        else:
            x = 1.0 if (k == ti - 1 and ev) else 0.0
            val -= x * eta - sp
            dl = -(x - p)
            c = -c
        a0 += dl
        a1 += dl * s
        c0 += c
        c1 += c * s
        c2 += c * s * s
    out[0] = val
    out[1] = g0 + lam * a0
    out[2] = g1 + lam * a1
    l2 = lam * lam
    out[3] = -P[0, 0] - l2 * c0
    out[4] = -P[0, 1] - l2 * c1
    out[5] = -P[1, 1] - l2 * c2


@njit(cache=True)
def _newton(P, m, oX, t, ti, ev, lam, u0, u1, with_g, out, tol, max_iter):
    _eval(P, m, oX, t, ti, ev, lam, u0, u1, with_g, out)
    for _ in range(max_iter):
        h00, h01, h11 = out[3], out[4], out[5]
        det = h00 * h11 - h01 * h01
        if h00 < 0 and det > 0:
            s0 = -(h11 * out[1] - h01 * out[2]) / det
            s1 = -(-h01 * out[1] + h00 * out[2]) / det
        else:
            s0 = 1e-3 * out[1]
            s1 = 1e-3 * out[2]
        val = out[0]
        alpha = 1.0
        for _ in range(30):
            _eval(P, m, oX, t, ti, ev, lam, u0 + alpha * s0, u1 + alpha * s1, with_g, out)
            if out[0] >= val - 1e-12 * max(1.0, abs(val)):
                break
            alpha *= 0.5
        u0 += alpha * s0
        u1 += alpha * s1
        if max(abs(alpha * s0), abs(alpha * s1)) <= tol:
            break
    return u0, u1


@njit(cache=True)
def log_h_kernel(P, m, oX, t, ti, ev, lam, eb, tol=1e-10, max_iter=50):
    """log h per instance.

    Args:
        P: (B, 2, 2); m: (B, 2); oX: (B, S) offsets.
        t: (B,) conditioning month; ti: (B,) durations; ev: (B,) event flags.
        lam: (B,) association.
        eb: plug-in (True) or Laplace (False).

    Returns:
        (log_h (B,), ok (B,)) where ``ok`` is False when the Laplace Hessian
        of log g is not negative definite at its mode.
    """
    B = P.shape[0]
    res = np.empty(B)
    ok = np.ones(B, dtype=np.bool_)
    out = np.empty(6)
    for b in range(B):
        u0, u1 = _newton(P[b], m[b], oX[b], t[b], ti[b], ev[b], lam[b], m[b, 0], m[b, 1], False, out, tol, max_iter)
        vf = out[0]
        det_f = out[3] * out[5] - out[4] * out[4]
        if eb:
            acc = 0.0
            for k in range(t[b], ti[b]):
                eta = oX[b, k] + lam[b] * (u0 + u1 * (k + 1.0))
                x = 1.0 if (k == ti[b] - 1 and ev[b]) else 0.0
                acc += x * eta - _softplus(eta)
            res[b] = -acc
            continue
        _newton(P[b], m[b], oX[b], t[b], ti[b], ev[b], lam[b], u0, u1, True, out, tol, max_iter)
        det_g = out[3] * out[5] - out[4] * out[4]
        if not (out[3] < 0 and det_g > 0):
            ok[b] = False
            res[b] = np.nan
            continue
        res[b] = (out[0] - 0.5 * math.log(det_g)) - (vf - 0.5 * math.log(det_f))
    return res, ok
