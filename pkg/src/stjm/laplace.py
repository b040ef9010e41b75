"""Constrained Laplace approximation and hyperparameter integration.

For fixed hyperparameters the latent posterior is approximated by a Gaussian
centred at the constrained mode, found by Newton iterations in which Gaussian
rows contribute exact quadratic terms and Bernoulli rows their working
weights ``p (1 - p)``. The hyperparameter posterior is then explored around
its mode on a grid (small problems) or a central composite design.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse, stats
from scipy.special import expit

from ._linalg import ArrowFactor
from .errors import ConvergenceError, InvalidHyperparameterError, NotPositiveDefiniteError
from .model import (
    LOG_2PI,
    HyperParams,
    ModelDefinition,
    assemble_precision,
    check_theta,
    global_prior_precision,
    log_hyper_prior,
    log_prior_normaliser,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# likelihood pieces


def bernoulli_loglik(x, eta):
    """Row-wise ``x eta - log(1 + exp(eta))``."""
    return x * eta - np.logaddexp(0.0, eta)


def bernoulli_curvature(eta):
    """Negative second derivative of the Bernoulli log-likelihood in eta."""
    p = expit(eta)
    return p * (1.0 - p)


def _split(model: ModelDefinition, mu):
    nU = model.layout.n_U
    return mu[:nU], mu[nU:]


def _predictors(model, U, g, lam):
    d = model.design
    dU = d.DU.T @ U
    eta_Y = d.YG @ g + dU
    eta_X = d.XG @ g + lam * dU if model.survival else None
    return eta_Y, eta_X


def log_likelihood(model: ModelDefinition, theta: HyperParams, mu: np.ndarray) -> float:
    """log p(D | mu, theta) including all normalising constants."""
    U, g = _split(model, mu)
    eta_Y, eta_X = _predictors(model, U, g, theta.lam)
    d = model.design
    r = d.y - eta_Y
    out = 0.5 * len(r) * (math.log(theta.tau_Y) - LOG_2PI) - 0.5 * theta.tau_Y * float(r @ r)
    if eta_X is not None:
        out += float(np.sum(bernoulli_loglik(d.x, eta_X)))
    return out


def prior_quadratic(model: ModelDefinition, theta: HyperParams, mu: np.ndarray, C_prior=None) -> float:
    """mu' Q(theta) mu, evaluated blockwise."""
    U, g = _split(model, mu)
    Uv = U.reshape(-1, 2)
    QU = theta.Q_U()
    q = float(np.einsum("ij,jk,ik->", Uv, QU, Uv))
    C = global_prior_precision(model, theta) if C_prior is None else C_prior
    return q + float(g @ C @ g)


def _kappa(C: np.ndarray) -> float:
    return max(1.0, float(np.mean(np.diag(C))))


def _assemble(model: ModelDefinition, theta: HyperParams, c: np.ndarray | None, C_prior: np.ndarray):
    """Arrow blocks of the posterior precision for row curvatures ``c``.

    ``kappa * A'A`` is added to the global block: it leaves the distribution
    restricted to ``A x = 0`` untouched and makes the matrix definite along
    directions the constraints remove.
    """
    d = model.design
    tY, lam = theta.tau_Y, theta.lam
    w = np.full(len(d.s), tY)
    if c is not None:
        w = w + lam * lam * c
    N = model.N
    D = np.empty((N, 2, 2))
    QU = theta.Q_U()
    D[:, 0, 0] = np.bincount(d.loan, w, N) + QU[0, 0]
    D[:, 0, 1] = D[:, 1, 0] = np.bincount(d.loan, w * d.s, N) + QU[0, 1]
    D[:, 1, 1] = np.bincount(d.loan, w * d.s * d.s, N) + QU[1, 1]
    G = model.layout.n_global
    B = tY * d.BY
    C = C_prior + tY * d.YtY
    if c is not None:
        B = B + lam * np.bincount(d.bx_idx, (c[:, None] * d.bx_w).ravel(), 2 * N * G).reshape(2 * N, G)
        C = C + np.bincount(d.cx_idx, (c[:, None] * d.cx_w).ravel(), G * G).reshape(G, G)
    Ag = model.global_constraints
    if Ag.shape[0]:
        C = C + _kappa(C_prior) * (Ag.T @ Ag)
    return D, B, C, Ag


def _rhs(model, theta, bX):
    d = model.design
    ry = theta.tau_Y * d.y
    rU = d.DU @ (ry + theta.lam * bX) if bX is not None else d.DU @ ry
    rg = d.YG.T @ ry
    if bX is not None:
        rg = rg + d.XG.T @ bX
    return rU, rg


# --------------------------------------------------------------------------
# Gaussian approximation


@dataclass
class GaussApprox:
    """Constrained Gaussian approximation of p(mu | theta, D).

    Attributes:
        theta: hyperparameters.
        mode: constrained posterior mode (full latent vector).
        curvature: Bernoulli working weights at the mode (None without survival).
        log_marginal: Laplace estimate of log p(theta | D) up to a constant.
        n_iter: Newton iterations used.
        trace: max |step| per iteration.
    """

    model: ModelDefinition = field(repr=False)
    theta: HyperParams
    mode: np.ndarray
    curvature: np.ndarray | None
    log_marginal: float
    n_iter: int
    trace: list
    _factor: ArrowFactor | None = field(default=None, repr=False)

    @property
    def factor(self) -> ArrowFactor:
        if self._factor is None:
            C_prior = global_prior_precision(self.model, self.theta)
            self._factor = ArrowFactor(*_assemble(self.model, self.theta, self.curvature, C_prior))
        return self._factor

    def release(self) -> None:
        self._factor = None

    @property
    def precision(self) -> sparse.csr_matrix:
        """Prior precision plus the negative log-likelihood Hessian at the mode."""
        m = self.model
        d = m.design
        nU = m.layout.n_U
        Q = assemble_precision(m, self.theta)
        AY = sparse.hstack([d.DU.T, d.YG]).tocsr()
        H = self.theta.tau_Y * (AY.T @ AY)
        if self.curvature is not None:
            AX = sparse.hstack([self.theta.lam * d.DU.T, d.XG]).tocsr()
            H = H + AX.T @ sparse.diags(self.curvature) @ AX
        assert H.shape == (nU + m.layout.n_global,) * 2
        return (Q + H).tocsr()

    @property
    def mode_U(self) -> np.ndarray:
        return self.mode[: self.model.layout.n_U].reshape(-1, 2)

    @property
    def mode_global(self) -> np.ndarray:
        return self.mode[self.model.layout.n_U :]

    def global_moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mode_global.copy(), self.factor.global_cov()

    def sample(self, n: int, rng: np.random.Generator, with_U: bool = True):
        """Draws from the constrained Gaussian; returns (n, dim) or (n, G) arrays."""
        xU, xg = self.factor.sample(n, rng, with_U=with_U)
        g = xg.T + self.mode_global
        if not with_U:
            return g
        return np.hstack([xU.T + self.mode[: self.model.layout.n_U], g])


def _objective(model, theta, mu, C_prior):
    return log_likelihood(model, theta, mu) - 0.5 * prior_quadratic(model, theta, mu, C_prior)


def gaussian_approximation(
    model: ModelDefinition,
    theta: HyperParams,
    mu0: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> GaussApprox:
    """Newton search for the constrained mode of p(mu | theta, D).

    Args:
        model: the model definition.
        theta: hyperparameters.
        mu0: optional warm start.
        tol: convergence threshold on max |step|.
        max_iter: iteration cap.

    Returns:
        GaussApprox with the Laplace log marginal filled in.

    Raises:
        ConvergenceError: no convergence within ``max_iter`` iterations.
        NotPositiveDefiniteError: the working precision lost definiteness.
    """
    check_theta(model, theta)
    C_prior = global_prior_precision(model, theta)
    nU = model.layout.n_U
    mu = np.zeros(model.dim) if mu0 is None else np.array(mu0, dtype=float)
    d = model.design
    trace: list[float] = []

    if not model.survival:
        factor = ArrowFactor(*_assemble(model, theta, None, C_prior))
        xU, xg = factor.constrain(*factor.solve(*_rhs(model, theta, None)))
        new = np.concatenate([xU, xg])
        trace.append(float(np.max(np.abs(new - mu))))
        mu, c, n_iter = new, None, 1
    else:
        obj = _objective(model, theta, mu, C_prior)
        converged = False
        for it in range(1, max_iter + 1):
            _, eta_X = _predictors(model, mu[:nU], mu[nU:], theta.lam)
            c = bernoulli_curvature(eta_X)
            bX = d.x - expit(eta_X) + c * eta_X
            factor = ArrowFactor(*_assemble(model, theta, c, C_prior))
            xU, xg = factor.constrain(*factor.solve(*_rhs(model, theta, bX)))
            step = np.concatenate([xU, xg]) - mu
            alpha = 1.0
            for _ in range(11):
                cand = mu + alpha * step
                obj_new = _objective(model, theta, cand, C_prior)
                if obj_new >= obj - 1e-10 * max(1.0, abs(obj)):
                    break
                alpha *= 0.5
            delta = float(np.max(np.abs(alpha * step)))
            trace.append(delta)
            mu, obj = cand, obj_new
            if delta < tol:
                converged = True
                break
        if not converged:
            raise ConvergenceError(f"Newton iterations did not converge in {max_iter} steps", trace)
        # the factor from the last iteration was built within tol of the mode
        n_iter = it

    ga = GaussApprox(model, theta, mu, c, 0.0, n_iter, trace, factor)
    ga.log_marginal = _laplace_evidence(model, theta, ga, C_prior)
    return ga


def _laplace_evidence(model, theta, ga: GaussApprox, C_prior) -> float:
    """log p(theta) + log p(D | mu*) + log p(mu* | theta) - log p_G(mu* | theta, D)."""
    mu = ga.mode
    f = ga.factor
    n_free = model.dim - f.k
    log_pG = -0.5 * n_free * LOG_2PI + 0.5 * f.constrained_logdet()
    out = log_hyper_prior(theta, model.priors, model.hyper_names)
    out += log_likelihood(model, theta, mu)
    out += log_prior_normaliser(model, theta) - 0.5 * prior_quadratic(model, theta, mu, C_prior)
    return out - log_pG


def log_posterior_hyper(model: ModelDefinition, theta: HyperParams, mu0=None, tol: float = 1e-6) -> float:
    """Unnormalised log p(theta | D) on the internal hyperparameter scale."""
    return gaussian_approximation(model, theta, mu0=mu0, tol=tol).log_marginal


# --------------------------------------------------------------------------
# hyperparameter exploration


class _Evaluator:
    """Caches Gaussian approximations and warm-starts Newton from the best mode."""

    def __init__(self, model: ModelDefinition, tol: float = 1e-8):
        self.model = model
        self.tol = tol
        self.best_mu = None
        self.best_val = -np.inf
        self.n_eval = 0

    def ga(self, x) -> GaussApprox:
        theta = self.model.theta_from_internal(x)
        ga = gaussian_approximation(self.model, theta, mu0=self.best_mu, tol=self.tol)
        self.n_eval += 1
        if ga.log_marginal > self.best_val:
            self.best_val, self.best_mu = ga.log_marginal, ga.mode
        return ga

    def __call__(self, x) -> float:
        try:
            return self.ga(x).log_marginal
        except (ConvergenceError, NotPositiveDefiniteError, InvalidHyperparameterError, OverflowError, ValueError):
            return -np.inf


def initial_theta(model: ModelDefinition) -> np.ndarray:
    """Moment-based starting point from per-loan least-squares fits."""
    ds = model.dataset
    coefs, resid = [], []
    for i in np.flatnonzero(ds.duration >= 3):
        sl = ds.loan_rows(i)
        s = ds.row_s[sl].astype(float)
        X = np.column_stack([np.ones_like(s), s])
        b, *_ = np.linalg.lstsq(X, ds.row_y[sl], rcond=None)
        coefs.append(b)
        resid.append(ds.row_y[sl] - X @ b)
    init = {"tau_Y": 1.0, "tau_U0": 1.0, "tau_U1": 1.0, "rho_01": 0.0, "lam": 0.0, "tau_v": 100.0, "tau_u": 10.0, "tau_delta": 10.0}
    if len(coefs) >= 5:
        coefs = np.array(coefs)
        r = np.concatenate(resid)
        dof = max(1, len(r) - 2 * len(coefs))
        init["tau_Y"] = 1.0 / max(float(r @ r) / dof, 1e-12)
        var = np.clip(np.var(coefs, axis=0, ddof=1), 1e-10, None)
        init["tau_U0"], init["tau_U1"] = 1 / var[0], 1 / var[1]
        init["rho_01"] = float(np.clip(np.corrcoef(coefs.T)[0, 1], -0.9, 0.9))
    theta = HyperParams(**init)
    return theta.to_internal(model.hyper_names)


def numeric_hessian(f, x, h: float = 0.01) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    H = np.empty((d, d))
    f0 = f(x)
    E = np.eye(d) * h
    fp = np.array([f(x + E[i]) for i in range(d)])
    fm = np.array([f(x - E[i]) for i in range(d)])
    for i in range(d):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
        for j in range(i):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def fractional_factorial(d: int) -> np.ndarray:
    """Two-level (fractional) factorial design with +-1 entries.

    Resolution-V fractions are used where available; generators multiply
    distinct base columns so every column stays balanced and orthogonal.
    """
    gens = {1: [], 2: [], 3: [], 4: [], 5: [[0, 1, 2, 3]], 6: [[0, 1, 2, 3, 4]], 7: [[0, 1, 2, 3, 4, 5]],
            8: [[0, 1, 2, 3], [0, 1, 4, 5]], 9: [[0, 1, 2, 3, 4, 5], [0, 1, 2, 6]],
            10: [[0, 1, 2, 3], [0, 1, 4, 5], [0, 2, 4, 6]]}
    if d not in gens:
        raise ValueError(f"no factorial design for d={d}")
    base = d - len(gens[d])
    F = np.array(list(itertools.product([-1.0, 1.0], repeat=base)))
    cols = [F] + [np.prod(F[:, g], axis=1, keepdims=True) for g in gens[d]]
    return np.hstack(cols)


def ccd_design(d: int, f0: float = 1.1) -> tuple[np.ndarray, np.ndarray]:
    """Central composite design in standardised coordinates with integration weights.

    Non-centre points lie on the sphere of radius ``f0 sqrt(d)``. Their weight
    relative to the centre makes the design reproduce the second moments of a
    standard normal exactly.

    Returns:
        (points (n, d), delta (n,)) with ``delta[0] = 1`` for the centre.
    """
    r = f0 * math.sqrt(d)
    star = np.vstack([np.eye(d) * r, -np.eye(d) * r])
    fact = fractional_factorial(d) * f0
    pts = np.vstack([np.zeros(d), star, fact])
    n_p = len(pts)
    w_out = 1.0 / ((n_p - 1) * (f0**2 - 1) * math.exp(-d * f0**2 / 2))
    delta = np.full(n_p, w_out)
    delta[0] = 1.0
    return pts, delta


@dataclass
class GridPoint:
    theta_internal: np.ndarray
    theta: HyperParams
    delta: float
    log_post: float
    weight: float
    ga: GaussApprox = field(repr=False)
    mean_global: np.ndarray = field(repr=False, default=None)
    var_global: np.ndarray = field(repr=False, default=None)


@dataclass
class FitResult:
    """Grid of hyperparameter points with weights and marginal summaries.

    ``hessian`` is the numeric Hessian of the log hyperparameter posterior at
    the mode on the internal scale (all NaN for the ``eb`` strategy).
    """

    model: ModelDefinition = field(repr=False)
    strategy: str
    mode_internal: np.ndarray
    hessian: np.ndarray
    grid: list
    summaries: dict
    n_evaluations: int = 0

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.grid])

    @property
    def mode_theta(self) -> HyperParams:
        return self.model.theta_from_internal(self.mode_internal)

    @property
    def mode_point(self) -> GridPoint:
        return self.grid[0]

    def summary_rows(self) -> list[tuple]:
        return [(name,) + tuple(vals) for name, vals in self.summaries.items()]

    def write_summary(self, path) -> None:
        write_summary_csv(self.summaries, path)


SUMMARY_HEADER = ("name", "mean", "sd", "q2.5", "q50", "q97.5")


def write_summary_csv(summaries: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for name, vals in summaries.items():
            w.writerow([name] + [f"{v:.10g}" for v in vals])


def _to_user(name: str, x):
    if name == "rho_01":
        return np.tanh(x)
    if name == "lambda":
        return x
    return np.exp(x)


_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(32)
_GH_W = _GH_W / _GH_W.sum()


def _hyper_summary(name: str, m: float, s: float) -> tuple:
    vals = _to_user(name, m + s * _GH_X)
    mean = float(vals @ _GH_W)
    sd = float(np.sqrt(max(((vals - mean) ** 2) @ _GH_W, 0.0)))
    q = [float(_to_user(name, m + s * stats.norm.ppf(p))) for p in (0.025, 0.5, 0.975)]
    return (mean, sd, *q)


def _mixture_summary(w, means, sds) -> tuple:
    mean = float(w @ means)
    sd = float(np.sqrt(max(w @ (sds**2 + means**2) - mean**2, 0.0)))
    if sd == 0:
        return (mean, 0.0, mean, mean, mean)
    lo, hi = float(np.min(means - 10 * sds)), float(np.max(means + 10 * sds))

    def cdf(x):
        return float(w @ stats.norm.cdf(x, means, np.where(sds > 0, sds, 1e-300)))

    q = [optimize.brentq(lambda x: cdf(x) - p, lo, hi, xtol=1e-12 * max(1, abs(mean))) for p in (0.025, 0.5, 0.975)]
    return (mean, sd, *q)


def _floor_hessian(H: np.ndarray, max_sd: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose -H, flooring eigenvalues so no direction has sd > max_sd."""
    ev, V = np.linalg.eigh(-0.5 * (H + H.T))
    ev = np.maximum(ev, 1.0 / max_sd**2)
    return ev, V


def fit(
    model: ModelDefinition,
    grid_strategy: str | None = None,
    x0: np.ndarray | None = None,
    step: float = 1.0,
    max_drop: float = 2.5,
    f0: float = 1.1,
    max_sd: float = 3.0,
    optimizer_options: dict | None = None,
) -> FitResult:
    """Explore the hyperparameter posterior and build the integration grid.

    Args:
        model: model definition.
        grid_strategy: "grid", "ccd" or "eb" (mode only). Defaults to "grid" for
            at most four hyperparameters and "ccd" otherwise.
        x0: optional internal-scale starting point.
        step: grid step in standardised (sd) units.
        max_drop: log-density drop below the mode at which the grid stops.
        f0: CCD radius inflation.
        max_sd: cap on the internal-scale sd used to standardise flat directions.
        optimizer_options: derivative-free optimiser settings; ``method`` selects
            Powell (default) or Nelder-Mead, the rest is passed through.

    Returns:
        FitResult with normalised weights and marginal summaries.
    """
    names = model.hyper_names
    d = len(names)
    strategy = grid_strategy or ("grid" if d <= 4 else "ccd")
    if strategy not in ("grid", "ccd", "eb"):
        raise ValueError(f"unknown grid strategy {strategy!r}")
    ev = _Evaluator(model)
    x0 = initial_theta(model) if x0 is None else np.asarray(x0, dtype=float)

    method = (optimizer_options or {}).get("method", "Powell")
    opts = {"xtol": 1e-3, "ftol": 1e-7} if method == "Powell" else {"xatol": 1e-4, "fatol": 1e-6, "adaptive": True}
    opts.update({k: v for k, v in (optimizer_options or {}).items() if k != "method"})
    res = optimize.minimize(lambda x: -ev(x), x0, method=method, options=opts)
    if not np.isfinite(res.fun):
        raise ConvergenceError("hyperparameter optimisation failed: no finite evaluation", [])
    x_mode = res.x
    ga_mode = ev.ga(x_mode)
    lp_mode = ga_mode.log_marginal

    # eb skips the curvature; the stored Hessian is NaN so it cannot be mistaken for one
    H = numeric_hessian(ev, x_mode) if strategy != "eb" else np.full((d, d), np.nan)
    eig, V = _floor_hessian(H if strategy != "eb" else -np.eye(d), max_sd)
    scale = V / np.sqrt(eig)  # theta = mode + scale @ z

    if strategy == "eb":
        Z, delta = np.zeros((1, d)), np.ones(1)
    elif strategy == "ccd":
        Z, delta = ccd_design(d, f0)
    else:
        Z = _explore_grid(lambda z: ev(x_mode + scale @ z) - lp_mode, d, step, max_drop)
        delta = np.ones(len(Z))

    points = []
    for z, dl in zip(Z, delta):
        x = x_mode + scale @ z
        if not np.any(z):
            ga = ga_mode
        else:
            try:
                ga = ev.ga(x)
            except (ConvergenceError, NotPositiveDefiniteError, InvalidHyperparameterError) as err:
                log.warning("dropping grid point %s: %s", np.round(x, 4), err)
                continue
        if strategy == "grid" and lp_mode - ga.log_marginal >= max_drop:
            continue
        points.append([x, ga, dl])
    if not points:
        raise ConvergenceError("empty hyperparameter grid", [])

    lps = np.array([p[1].log_marginal for p in points])
    raw = np.array([p[2] for p in points]) * np.exp(lps - lps.max())
    w = raw / raw.sum()
    grid = []
    for (x, ga, dl), lp, wt in zip(points, lps, w):
        gp = GridPoint(x, ga.theta, float(dl), float(lp), float(wt), ga)
        m, cov = ga.global_moments()
        gp.mean_global, gp.var_global = m, np.clip(np.diag(cov), 0, None)
        ga.release()
        grid.append(gp)

    summaries = {}
    X = np.array([gp.theta_internal for gp in grid])
    mean_int = w @ X
    var_int = w @ (X - mean_int) ** 2
    if strategy == "eb" or len(grid) == 1:
        var_int = 1.0 / np.maximum(np.diag(-H), 1e-300) if strategy != "eb" else np.zeros(d)
    for j, name in enumerate(names):
        summaries[name] = _hyper_summary(name, mean_int[j], math.sqrt(max(var_int[j], 0)))
    means = np.array([gp.mean_global for gp in grid])
    sds = np.sqrt(np.array([gp.var_global for gp in grid]))
    for j, name in enumerate(model.latent_names()):
        summaries[name] = _mixture_summary(w, means[:, j], sds[:, j])

    return FitResult(model, strategy, x_mode, H, grid, summaries, ev.n_eval)


def _explore_grid(f, d: int, step: float, max_drop: float, max_steps: int = 12) -> np.ndarray:
    """Axis-parallel exploration in standardised coordinates.

    Each axis is walked in both directions while the drop stays below
    ``max_drop``; the grid is the tensor product of the axis ranges, filtered
    later on the same drop criterion.
    """
    ranges = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        lo = hi = 0
        while hi < max_steps and -f((hi + 1) * e) < max_drop:
            hi += 1
        while lo > -max_steps and -f((lo - 1) * e) < max_drop:
            lo -= 1
        ranges.append(np.arange(lo, hi + 1) * step)
    pts = np.array(list(itertools.product(*ranges)), dtype=float).reshape(-1, d)
    order = np.argsort(np.sum(pts**2, axis=1), kind="stable")
    return pts[order]


# --------------------------------------------------------------------------
# posterior sampling


def grid_point_sampler(fit: FitResult, w: int):
    """Gaussian approximation at grid point ``w`` with its factor ready."""
    return fit.grid[w].ga


def sample_latent(fit: FitResult, R: int, seed=None, with_U: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Posterior draws of the latent field from the grid mixture.

    Each draw picks a grid point by its normalised weight, then samples the
    constrained Gaussian at that point.

    Returns:
        (w_index (R,), samples (R, dim)); the U block is omitted (samples have
        the global dimension only) when ``with_U`` is False.
    """
    rng = np.random.default_rng(seed)
    w_idx = rng.choice(len(fit.grid), size=R, p=fit.weights)
    G = fit.model.layout.n_global
    dim = fit.model.dim if with_U else G
    out = np.empty((R, dim))
    for w in np.unique(w_idx):
        sel = np.flatnonzero(w_idx == w)
        ga = fit.grid[w].ga
        out[sel] = ga.sample(len(sel), rng, with_U=with_U)
        ga.release()
    return w_idx, out
