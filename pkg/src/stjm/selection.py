"""Cross-validated Dynamic Conditional Likelihood (cvDCL).

For a loan at risk after month ``t`` the score contribution is
``log h_i``, where ``h_i`` estimates the inverse predictive probability of
the loan's remaining event history given its longitudinal history up to
``t``::

    h_i = E_U[ 1 / p(T_i, delta_i | T_i > t, U, theta, mu_-U) ],

the expectation taken over ``U_i | T_i > t, y_i(t), theta, mu_-U``. Smaller
cvDCL is better.

Two estimators are provided: the grid/Gaussian-approximation one with a
delta-method Monte Carlo error, and an MCMC one with a batch-means error.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from ._hkernel import log_h_kernel
from .errors import SelectionError
from .laplace import FitResult
from .mcmc import ChainResult
from .model import HyperParams, ModelDefinition

log = logging.getLogger(__name__)

METHODS = ("laplace", "eb", "quadrature")
_GH_N = 24


def _softplus(x):
    return np.logaddexp(0.0, x)


def _check_at_risk(model: ModelDefinition, i: int, t: int) -> None:
    if not model.dataset.duration[i] > t:
        raise SelectionError(f"loan {i} is not at risk after month {t} (duration {model.dataset.duration[i]})")


def conditional_event_loglik(model: ModelDefinition, theta: HyperParams, mu_minus_Ui, U_i, i: int, t: int) -> float:
    """log p(T_i, delta_i | T_i > t, U_i, theta, mu_-U) for one loan.

    Args:
        model: model definition.
        theta: hyperparameters (only lambda is used).
        mu_minus_Ui: global block of the latent field.
        U_i: (U0, U1) of the loan.
        i: 0-based loan index.
        t: conditioning month.
    """
    _check_at_risk(model, i, t)
    ds = model.dataset
    d = model.design
    rows = np.arange(ds.row_offsets[i] + t, ds.row_offsets[i + 1])
    g = np.asarray(mu_minus_Ui, dtype=float)
    s = d.s[rows]
    eta = (g[d.x_cols[rows]] * d.x_vals[rows]).sum(axis=1) + theta.lam * (U_i[0] + U_i[1] * s)
    x = d.x[rows]
    return float(np.sum(x * eta - _softplus(eta)))


# --------------------------------------------------------------------------
# batched h_i


@dataclass
class HBatch:
    """Padded per-instance inputs of h_i.

    Attributes:
        P: (B, 2, 2) precision of the Gaussian part (prior x longitudinal rows up to t).
        m: (B, 2) its mean.
        oX: (B, S) survival predictor offsets (everything but the U term).
        pre: (B, S) mask of months s <= t.
        post: (B, S) mask of months t < s <= t_i.
        x: (B, S) event indicators.
        lam: (B,) association parameter.
    """

    P: np.ndarray
    m: np.ndarray
    oX: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    x: np.ndarray
    lam: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return np.arange(1, self.oX.shape[1] + 1, dtype=float)

    def take(self, idx) -> "HBatch":
        return HBatch(*(getattr(self, f)[idx] for f in ("P", "m", "oX", "pre", "post", "x", "lam")))


def _terms(b: HBatch, U: np.ndarray, which: str):
    """Value, gradient and Hessian of log f (which='f') or log g = log f - log L ('g').

    U has shape (B, 2) or (B, K, 2) for K evaluation points per instance.
    """
    s = b.s
    multi = U.ndim == 3
    if multi:
        U0, U1 = U[..., 0][:, :, None], U[..., 1][:, :, None]
        lam = b.lam[:, None, None]
        oX, pre, post, x = (a[:, None, :] for a in (b.oX, b.pre, b.post, b.x))
        dm = U - b.m[:, None, :]
        quad = np.einsum("bki,bij,bkj->bk", dm, b.P, dm)
    else:
        U0, U1 = U[:, :1], U[:, 1:]
        lam = b.lam[:, None]
        oX, pre, post, x = b.oX, b.pre, b.post, b.x
        dm = U - b.m
        quad = np.einsum("bi,bij,bj->b", dm, b.P, dm)
    eta = oX + lam * (U0 + U1 * s)
    sp = _softplus(eta)
    val = -0.5 * quad - np.sum(np.where(pre, sp, 0.0), axis=-1)
    p = expit(eta)
    gw = -np.where(pre, p, 0.0)  # d/deta of the survival-to-t part
    cw = np.where(pre, p * (1 - p), 0.0)
    if which == "g":
        val = val - np.sum(np.where(post, x * eta - sp, 0.0), axis=-1)
        gw = gw - np.where(post, x - p, 0.0)
        cw = cw - np.where(post, p * (1 - p), 0.0)
    if multi:
        return val, None, None
    lam1 = b.lam
    grad = -np.einsum("bij,bj->bi", b.P, dm)
    grad[:, 0] += lam1 * gw.sum(-1)
    grad[:, 1] += lam1 * (gw * s).sum(-1)
    l2 = lam1**2
    H = -b.P.copy()
    H[:, 0, 0] -= l2 * cw.sum(-1)
    H[:, 0, 1] -= l2 * (cw * s).sum(-1)
    H[:, 1, 1] -= l2 * (cw * s * s).sum(-1)
    H[:, 1, 0] = H[:, 0, 1]
    return val, grad, H


def _det2(H):
    return H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] * H[:, 1, 0]


def _newton_2d(b: HBatch, U0: np.ndarray, which: str, tol: float = 1e-10, max_iter: int = 50):
    """Vectorised damped Newton ascent; returns (U, value, H, ok)."""
    U = U0.copy()
    val, grad, H = _terms(b, U, which)
    active = np.ones(len(U), dtype=bool)
    for _ in range(max_iter):
        det = _det2(H)
        nd = (H[:, 0, 0] < 0) & (det > 0)
        # Newton step where the Hessian is negative definite, gradient step otherwise
        step = np.empty_like(U)
        step[:, 0] = -(H[:, 1, 1] * grad[:, 0] - H[:, 0, 1] * grad[:, 1]) / np.where(nd, det, 1.0)
        step[:, 1] = -(-H[:, 1, 0] * grad[:, 0] + H[:, 0, 0] * grad[:, 1]) / np.where(nd, det, 1.0)
        step[~nd] = 1e-3 * grad[~nd]
        step[~active] = 0.0
        alpha = np.ones(len(U))
        for _ in range(30):
            cand = U + alpha[:, None] * step
            v_c, _, _ = _terms(b, cand, which)
            bad = (v_c < val - 1e-12 * np.maximum(1.0, np.abs(val))) & active
            if not bad.any():
                break
            alpha[bad] *= 0.5
        U = cand
        moved = np.max(np.abs(alpha[:, None] * step), axis=1)
        val, grad, H = _terms(b, U, which)
        active &= moved > tol
        if not active.any():
            break
    det = _det2(H)
    ok = (H[:, 0, 0] < 0) & (det > 0)
    return U, val, H, ok


_GH_X, _GH_W = np.polynomial.hermite.hermgauss(_GH_N)


def _log_integral_gh(b: HBatch, center: np.ndarray, H: np.ndarray, which: str, chunk: int = 256) -> np.ndarray:
    """Adaptive Gauss-Hermite estimate of log of the integral of exp(log f or log g)."""
    cov = np.linalg.inv(-H)
    L = np.linalg.cholesky(cov)
    xx, yy = np.meshgrid(_GH_X, _GH_X, indexing="ij")
    nodes = np.stack([xx.ravel(), yy.ravel()], axis=1)  # (K, 2)
    logw = (np.log(_GH_W)[:, None] + np.log(_GH_W)[None, :]).ravel() + np.sum(nodes**2, axis=1)
    out = np.empty(len(center))
    for a in range(0, len(center), chunk):
        sl = slice(a, a + chunk)
        sub = b.take(sl)
        U = center[sl, None, :] + math.sqrt(2) * np.einsum("bij,kj->bki", L[sl], nodes)
        val, _, _ = _terms(sub, U, which)
        logdetL = np.log(L[sl, 0, 0]) + np.log(L[sl, 1, 1])
        out[sl] = math.log(2.0) + logdetL + logsumexp(val + logw[None, :], axis=1)
    return out


def log_h_batch(b: HBatch, method: str = "laplace", compiled: bool = True) -> np.ndarray:
    """log h_i for every instance in the batch.

    Args:
        b: padded instances.
        method: "laplace", "eb" or "quadrature".
        compiled: use the compiled per-instance kernel for "laplace"/"eb";
            the vectorised NumPy path is kept as a cross-check.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if compiled and method != "quadrature":
        t = b.pre.sum(axis=1).astype(np.int64)
        ti = t + b.post.sum(axis=1).astype(np.int64)
        ev = b.x[np.arange(len(ti)), ti - 1] > 0
        out, ok = log_h_kernel(
            np.ascontiguousarray(b.P), np.ascontiguousarray(b.m), np.ascontiguousarray(b.oX),
            t, ti, ev, np.ascontiguousarray(b.lam, dtype=float), method == "eb",
        )
        if not ok.all():
            bad = ~ok
            warnings.warn(
                f"{int(bad.sum())} h_i integrand(s) without a negative definite Hessian; using quadrature",
                RuntimeWarning,
                stacklevel=2,
            )
            out[bad] = log_h_batch(b.take(bad), "quadrature")
        return out
    Uf, vf, Hf, okf = _newton_2d(b, b.m, "f")
    if method == "eb":
        s = b.s
        eta = b.oX + b.lam[:, None] * (Uf[:, :1] + Uf[:, 1:] * s)
        return -np.sum(np.where(b.post, b.x * eta - _softplus(eta), 0.0), axis=1)
    if method == "quadrature":
        log_zf = _log_integral_gh(b, Uf, Hf, "f")
        Ug, vg, Hg, okg = _newton_2d(b, Uf, "g")
        Hg = np.where(okg[:, None, None], Hg, Hf)
        return _log_integral_gh(b, Ug, Hg, "g") - log_zf
    Ug, vg, Hg, okg = _newton_2d(b, Uf, "g")
    with np.errstate(invalid="ignore"):
        out = (vg - 0.5 * np.log(_det2(Hg) * np.where(okg, 1.0, np.nan))) - (vf - 0.5 * np.log(_det2(Hf)))
    bad = ~okg | ~np.isfinite(out)
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} h_i integrand(s) without a negative definite Hessian; using quadrature",
            RuntimeWarning,
            stacklevel=2,
        )
        out[bad] = log_h_batch(b.take(bad), "quadrature")
    return out


# --------------------------------------------------------------------------
# building batches from the model


class _LoanTable:
    """Padded per-loan row views for the loans at risk after ``t``."""

    def __init__(self, model: ModelDefinition, t: int, loans: np.ndarray | None = None, S: int | None = None):
        ds = model.dataset
        at_risk = ds.at_risk(t) if loans is None else np.asarray(loans)
        if at_risk.size == 0:
            raise SelectionError(f"no loans at risk after month {t}")
        if np.any(ds.duration[at_risk] <= t):
            raise SelectionError(f"some requested loans are not at risk after month {t}")
        self.loans = at_risk
        self.t = t
        dur = ds.duration[at_risk]
        S = int(dur.max()) if S is None else int(S)
        self.S = S
        s = np.arange(1, S + 1)
        valid = s[None, :] <= dur[:, None]
        off = ds.row_offsets[at_risk]
        rows = np.where(valid, off[:, None] + s[None, :] - 1, 0)
        self.rows = rows
        self.valid = valid
        self.pre = valid & (s[None, :] <= t)
        self.post = valid & (s[None, :] > t)
        d = model.design
        self.x = np.where(valid, d.x[rows], 0.0)
        self.y_pre = d.y[rows[:, :t]]  # every at-risk loan has t longitudinal rows up to t
        self.x_cols = d.x_cols[rows]  # (n, S, k)
        self.x_vals = np.where(valid[:, :, None], d.x_vals[rows], 0.0)
        self.area = ds.area[at_risk]

    def subset(self, sl) -> "_LoanTable":
        sub = _LoanTable.__new__(_LoanTable)
        n = len(self.loans)
        for k, v in self.__dict__.items():
            sub.__dict__[k] = v[sl] if isinstance(v, np.ndarray) and v.shape[:1] == (n,) else v
        return sub

    def offsets(self, g: np.ndarray) -> np.ndarray:
        """Survival offsets for global draws ``g`` of shape (n, R, G) -> (n, R, S)."""
        n, R, _ = g.shape
        idx = self.x_cols.reshape(n, 1, -1)
        vals = np.take_along_axis(g, np.broadcast_to(idx, (n, R, idx.shape[-1])), axis=2)
        vals = vals.reshape(n, R, self.S, -1) * self.x_vals[:, None, :, :]
        return vals.sum(-1)


def _gaussian_part(model: ModelDefinition, theta: HyperParams, tab: _LoanTable, g: np.ndarray):
    """Precision and mean of prior x longitudinal likelihood for months s <= t.

    Args:
        g: (n, R, G) global draws.

    Returns:
        P (2, 2) shared by all instances and m (n, R, 2).
    """
    t = tab.t
    s = np.arange(1, t + 1, dtype=float)
    Dm = np.stack([np.ones(t), s], axis=1)
    P = theta.Q_U() + theta.tau_Y * Dm.T @ Dm
    b1 = model.layout.offset("beta1") - model.layout.n_U
    oY = g[:, :, b1, None] + g[:, :, b1 + 1, None] * s  # (n, R, t)
    resid = tab.y_pre[:, None, :] - oY
    rhs = theta.tau_Y * np.einsum("nrs,sk->nrk", resid, Dm)
    m = np.linalg.solve(P, rhs.reshape(-1, 2).T).T.reshape(rhs.shape)
    return P, m


def _make_batch(model, theta, tab: _LoanTable, g: np.ndarray) -> HBatch:
    n, R, _ = g.shape
    P, m = _gaussian_part(model, theta, tab, g)
    oX = tab.offsets(g)
    B = n * R

    def rep(a):
        return np.repeat(a, R, axis=0)

    return HBatch(
        P=np.broadcast_to(P, (B, 2, 2)).copy(),
        m=m.reshape(B, 2),
        oX=oX.reshape(B, tab.S),
        pre=rep(tab.pre),
        post=rep(tab.post),
        x=rep(tab.x),
        lam=np.full(B, theta.lam),
    )


def h_i(model: ModelDefinition, theta: HyperParams, mu_sample, i: int, t: int, method: str = "laplace") -> float:
    """h_i for one loan and one global draw.

    Args:
        model: model definition.
        theta: hyperparameters of the grid point.
        mu_sample: global block of a latent draw (or a full latent vector).
        i: 0-based loan index (must be at risk after ``t``).
        t: conditioning month.
        method: "laplace", "eb" or "quadrature".
    """
    _check_at_risk(model, i, t)
    g = np.asarray(mu_sample, dtype=float)
    if len(g) == model.dim:
        g = g[model.layout.n_U :]
    tab = _LoanTable(model, t, np.array([i]))
    b = _make_batch(model, theta, tab, g[None, None, :])
    return float(np.exp(log_h_batch(b, method)[0]))


# --------------------------------------------------------------------------
# estimators


@dataclass
class CvdclResult:
    """cvDCL at one evaluation time."""

    t: int
    N_t: int
    estimate: float
    mc_se: float
    method: str
    loans: np.ndarray = field(repr=False)
    terms: np.ndarray = field(repr=False)
    areas: np.ndarray = field(repr=False)
    model_label: str = ""

    def area_contributions(self) -> dict:
        return area_contributions(self.terms, self.areas, self.N_t)


def area_contributions(terms, areas, N_t: int) -> dict:
    """Per-area sums of loan terms divided by N_t (they add up to the estimate)."""
    out = {}
    for a in np.unique(areas):
        out[int(a)] = float(np.sum(terms[areas == a]) / N_t)
    return out


def _chunks(n: int, size: int):
    for a in range(0, n, size):
        yield slice(a, min(n, a + size))


def cvdcl_inla(
    fit: FitResult,
    t: int,
    R: int = 50,
    method: str = "laplace",
    seed=None,
    shared_draws: bool = False,
) -> CvdclResult:
    """Grid estimator of cvDCL with its delta-method Monte Carlo error.

    For every grid point ``w`` and at-risk loan, ``R`` global draws are taken
    from the constrained Gaussian at ``w`` (independently per loan unless
    ``shared_draws``), ``h_i`` is evaluated for each, and

        estimate = mean_i log sum_w pi_w mean_r h_i(w, r).

    The error propagates the per-(i, w) sample variances of ``h`` through the
    log by the delta method, treating loans as independent.
    """
    return cvdcl_inla_times(fit, [t], R, (method,), seed, shared_draws)[(t, method)]


_TAGS = {"laplace": "inla-laplace", "eb": "inla-eb", "quadrature": "quadrature-oracle"}


def cvdcl_inla_times(
    fit: FitResult,
    times,
    R: int = 50,
    methods=("laplace",),
    seed=None,
    shared_draws: bool = False,
    chunk: int = 4000,
) -> dict:
    """:func:`cvdcl_inla` for several times and methods on common draws.

    Each loan gets its own draws per grid point; they are reused across the
    requested times and methods.

    Returns:
        ``{(t, method): CvdclResult}``.
    """
    if R < 2:
        raise SelectionError("need R >= 2 draws per grid point")
    times = [int(t) for t in times]
    for mth in methods:
        if mth not in METHODS:
            raise ValueError(f"unknown method {mth!r}")
    model = fit.model
    ds = model.dataset
    for t in times:
        if ds.n_at_risk(t) == 0:
            raise SelectionError(f"no loans at risk after month {t}")
    t_min = min(times)
    base = _LoanTable(model, t_min)
    n_all = len(base.loans)
    tables = {t: _LoanTable(model, t, base.loans[ds.duration[base.loans] > t], S=base.S) for t in times}
    pos = {t: np.flatnonzero(ds.duration[base.loans] > t) for t in times}
    rng = np.random.default_rng(seed)
    W = len(fit.grid)
    G = model.layout.n_global
    log_m = {(t, mth): np.empty((len(pos[t]), W)) for t in times for mth in methods}
    log_v = {k: np.empty_like(v) for k, v in log_m.items()}
    per = max(1, chunk // R)
    for w, gp in enumerate(fit.grid):
        ga = gp.ga
        if shared_draws:
            gdraw = np.broadcast_to(ga.sample(R, rng, with_U=False), (n_all, R, G))
        else:
            gdraw = ga.sample(n_all * R, rng, with_U=False).reshape(n_all, R, G)
        ga.release()
        for t in times:
            tab = tables[t]
            n = len(pos[t])
            lh = {mth: np.empty((n, R)) for mth in methods}
            for sl in _chunks(n, per):
                b = _make_batch(model, gp.theta, tab.subset(sl), np.ascontiguousarray(gdraw[pos[t][sl]]))
                for mth in methods:
                    lh[mth][sl] = log_h_batch(b, mth).reshape(-1, R)
            for mth in methods:
                x = lh[mth]
                log_m[t, mth][:, w] = logsumexp(x, axis=1) - math.log(R)
                # sample variance of h on a shifted scale
                mx = x.max(axis=1, keepdims=True)
                hs = np.exp(x - mx)
                var = np.sum((hs - hs.mean(axis=1, keepdims=True)) ** 2, axis=1) / (R - 1)
                with np.errstate(divide="ignore"):
                    log_v[t, mth][:, w] = np.log(var) + 2 * mx[:, 0]
    with np.errstate(divide="ignore"):
        log_pi = np.log(fit.weights)
    out = {}
    for (t, mth), lm in log_m.items():
        n = lm.shape[0]
        terms = logsumexp(lm + log_pi, axis=1)
        # var(term_i) = sum_w pi_w^2 s2_iw / R / (sum_w pi_w m_iw)^2
        var_terms = np.exp(logsumexp(log_v[t, mth] + 2 * log_pi, axis=1) - 2 * terms) / R
        est = float(np.sum(terms) / n)
        se = float(math.sqrt(np.sum(var_terms)) / n)
        out[t, mth] = CvdclResult(t, n, est, se, _TAGS[mth], tables[t].loans, terms, tables[t].area)
    return out


def _neg_loglik_post(model: ModelDefinition, chain: ChainResult, times, chunk: int = 200):
    """For each t, (loans at risk, -log L matrix of shape (n_t, G))."""
    ds = model.dataset
    d = model.design
    lam_j = list(chain.hyper_names).index("lambda")
    G = chain.G
    out = {t: np.empty((ds.n_at_risk(t), G)) for t in times}
    risk = {t: ds.at_risk(t) for t in times}
    nU = model.layout.n_U
    off = ds.row_offsets
    for sl in _chunks(G, chunk):
        mu = chain.latent[sl]
        lam = chain.theta[sl, lam_j]
        dU = (d.DU.T @ mu[:, :nU].T)  # (rows, g)
        eta = d.XG @ mu[:, nU:].T + dU * lam[None, :]
        ll = d.x[:, None] * eta - _softplus(eta)
        cs = np.vstack([np.zeros((1, ll.shape[1])), np.cumsum(ll, axis=0)])
        for t in times:
            i = risk[t]
            # rows of loan i are contiguous; months t+1..t_i follow its first t rows
            out[t][:, sl] = -(cs[off[i + 1]] - cs[off[i] + t])
    return risk, out


def cvdcl_mcmc(chain: ChainResult, t: int, n_batches: int = 20) -> CvdclResult:
    """MCMC estimator: mean_i log mean_g 1 / p(T_i, delta_i | T_i > t, U_i^g, Theta^g).

    The Monte Carlo error is the sd of the estimates from ``n_batches``
    successive equal batches of the chain divided by sqrt(n_batches).
    """
    return cvdcl_mcmc_times(chain, [t], n_batches)[0]


def cvdcl_mcmc_times(chain: ChainResult, times, n_batches: int = 20) -> list[CvdclResult]:
    model = chain.model
    G = chain.G
    if n_batches < 2 or G % n_batches:
        raise SelectionError(f"chain length {G} is not divisible into {n_batches} batches")
    for t in times:
        if model.dataset.n_at_risk(t) == 0:
            raise SelectionError(f"no loans at risk after month {t}")
    risk, nll = _neg_loglik_post(model, chain, list(times))
    H = G // n_batches
    res = []
    for t in times:
        M = nll[t]
        n = M.shape[0]
        terms = logsumexp(M, axis=1) - math.log(G)
        est = float(np.sum(terms) / n)
        batch = [np.sum(logsumexp(M[:, k * H : (k + 1) * H], axis=1) - math.log(H)) / n for k in range(n_batches)]
        se = float(np.std(batch, ddof=1) / math.sqrt(n_batches))
        res.append(CvdclResult(t, n, est, se, "mcmc", risk[t], terms, model.dataset.area[risk[t]]))
    return res


# --------------------------------------------------------------------------
# reports


@dataclass
class CvdclReport:
    """cvDCL estimates for several models and evaluation times."""

    results: list = field(default_factory=list)

    def add(self, result: CvdclResult, model_label: str) -> None:
        result.model_label = model_label
        self.results.append(result)

    @property
    def times(self) -> list:
        return sorted({r.t for r in self.results})

    def get(self, model_label: str, t: int, method: str | None = None) -> CvdclResult:
        for r in self.results:
            if r.model_label == model_label and r.t == t and (method is None or r.method == method):
                return r
        raise KeyError((model_label, t, method))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "N_t", "model", "method", "estimate", "mc_se"])
            for r in sorted(self.results, key=lambda r: (r.t, r.model_label, r.method)):
                w.writerow([r.t, r.N_t, r.model_label, r.method, f"{r.estimate:.10g}", f"{r.mc_se:.6g}"])

    def write_area_csv(self, path, baseline: str | None = None) -> None:
        rows = cvdcl_by_area(self, baseline)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["area", "t", "model", "method", "contribution", "difference"])
            for row in rows:
                w.writerow([row[0], row[1], row[2], row[3], f"{row[4]:.10g}", "" if row[5] is None else f"{row[5]:.10g}"])


def cvdcl_by_area(report: CvdclReport, baseline: str | None = None) -> list[tuple]:
    """Per-area contributions and differences against a baseline model.

    Returns:
        Rows (area, t, model, method, contribution, contribution - baseline's
        contribution or None).
    """
    rows = []
    for r in report.results:
        contrib = r.area_contributions()
        base = None
        if baseline is not None and baseline != r.model_label:
            try:
                base = report.get(baseline, r.t, r.method).area_contributions()
            except KeyError:
                base = None
        for a, c in sorted(contrib.items()):
            diff = None if base is None else c - base.get(a, 0.0)
            rows.append((a, r.t, r.model_label, r.method, c, diff))
    return rows
