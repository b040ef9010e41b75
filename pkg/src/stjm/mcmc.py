"""Metropolis-within-Gibbs sampler for the joint model.

Each sweep updates

1. every hyperparameter by a random-walk Metropolis step on the internal
   scale (target: log p(theta) + log p(mu | theta) + log p(D | mu, theta));
2. the whole latent field by an independence Metropolis-Hastings step whose
   proposal is the constrained Gaussian approximation at the current theta.

Random-walk scales adapt during burn-in only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, InvalidHyperparameterError, ModelSpecError, NotPositiveDefiniteError
from .laplace import (
    _predictors,
    bernoulli_loglik,
    gaussian_approximation,
    initial_theta,
    log_likelihood,
    prior_quadratic,
)
from .model import LOG_2PI, ModelDefinition, global_prior_precision, log_hyper_prior, log_prior_normaliser

TARGET_ACCEPT = 0.44


@dataclass
class ChainResult:
    """Thinned post-burn-in draws.

    Attributes:
        hyper_names: internal-scale hyperparameter names.
        theta: (G, d) internal-scale draws.
        latent: (G, dim) latent draws.
        acceptance: acceptance rate per block over the retained phase.
        seed, iterations, burn_in, thin: run settings.
        steps: frozen random-walk scales.
    """

    hyper_names: tuple
    theta: np.ndarray
    latent: np.ndarray
    acceptance: dict
    seed: int | None
    iterations: int
    burn_in: int
    thin: int
    steps: np.ndarray
    model: ModelDefinition | None = field(default=None, repr=False)

    @property
    def G(self) -> int:
        return self.theta.shape[0]

    def theta_user(self) -> np.ndarray:
        """Draws on the natural scale (precisions, rho, lambda)."""
        out = self.theta.copy()
        for j, n in enumerate(self.hyper_names):
            if n == "rho_01":
                out[:, j] = np.tanh(out[:, j])
            elif n != "lambda":
                out[:, j] = np.exp(out[:, j])
        return out

    def global_draws(self) -> np.ndarray:
        nU = self.model.layout.n_U
        return self.latent[:, nU:]

    def summaries(self) -> dict:
        """Posterior mean, sd and quantiles per hyperparameter and global latent."""
        out = {}
        cols = [(n, self.theta_user()[:, j]) for j, n in enumerate(self.hyper_names)]
        g = self.global_draws()
        cols += [(n, g[:, j]) for j, n in enumerate(self.model.latent_names())]
        for name, x in cols:
            q = np.quantile(x, [0.025, 0.5, 0.975])
            out[name] = (float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0, *map(float, q))
        return out

    def export(self, path) -> list[Path]:
        """Write draws to ``<path>.npz`` and a JSON manifest next to it."""
        path = Path(path)
        npz = path.with_suffix(".npz")
        np.savez_compressed(npz, theta=self.theta, latent=self.latent, steps=self.steps)
        manifest = {
            "hyper_names": list(self.hyper_names),
            "seed": self.seed,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "acceptance": self.acceptance,
            "layout": [list(b) for b in self.model.layout.blocks] if self.model else None,
            "variant": self.model.variant if self.model else None,
        }
        man = path.with_suffix(".json")
        man.write_text(json.dumps(manifest, indent=1))
        return [npz, man]


class _State:
    """Current (theta, mu) with cached likelihood pieces."""

    def __init__(self, model: ModelDefinition, x: np.ndarray, mu: np.ndarray):
        self.model = model
        self.x = x.copy()
        self.mu = mu.copy()
        self.refresh_mu()

    def refresh_mu(self):
        m = self.model
        nU = m.layout.n_U
        U, g = self.mu[:nU], self.mu[nU:]
        d = m.design
        self.dU = d.DU.T @ U
        r = d.y - (d.YG @ g + self.dU)
        self.rss = float(r @ r)
        self.n_y = len(r)
        self.base_X = d.XG @ g if m.survival else None
        Uv = U.reshape(-1, 2)
        self.uu = Uv.T @ Uv  # sum of U U'
        self.g = g

    def log_target(self, x: np.ndarray) -> float:
        m = self.model
        theta = m.theta_from_internal(x)
        QU = theta.Q_U()
        out = log_hyper_prior(theta, m.priors, m.hyper_names)
        out += 0.5 * self.n_y * (math.log(theta.tau_Y) - LOG_2PI) - 0.5 * theta.tau_Y * self.rss
        if self.base_X is not None:
            out += float(np.sum(bernoulli_loglik(m.design.x, self.base_X + theta.lam * self.dU)))
        quad = float(np.sum(QU * self.uu)) + float(self.g @ global_prior_precision(m, theta) @ self.g)
        return out + log_prior_normaliser(m, theta) - 0.5 * quad


def _latent_log_density(model, theta, mu, C_prior) -> float:
    return log_likelihood(model, theta, mu) - 0.5 * prior_quadratic(model, theta, mu, C_prior)


def run_mcmc(
    model: ModelDefinition,
    iterations: int = 20000,
    burn_in: int = 5000,
    thin: int = 5,
    seed=None,
    theta0: np.ndarray | None = None,
    steps0: np.ndarray | None = None,
    adapt_every: int = 50,
    fixed_theta: np.ndarray | None = None,
) -> ChainResult:
    """Run one chain.

    Args:
        model: model definition.
        iterations: total sweeps including burn-in.
        burn_in: sweeps discarded (and used for adaptation).
        thin: keep every ``thin``-th post-burn-in sweep.
        seed: seed for the chain's generator.
        theta0: internal-scale starting hyperparameters.
        steps0: initial random-walk scales.
        adapt_every: adaptation batch length during burn-in.
        fixed_theta: hold the hyperparameters at this internal-scale value.

    Returns:
        ChainResult with ``(iterations - burn_in) // thin`` draws.
    """
    if iterations <= burn_in or burn_in < 0 or thin < 1:
        raise ModelSpecError("need iterations > burn_in >= 0 and thin >= 1")
    rng = np.random.default_rng(seed)
    names = model.hyper_names
    d = len(names)
    if fixed_theta is not None:
        x = np.asarray(fixed_theta, dtype=float).copy()
    else:
        x = initial_theta(model) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    steps = np.full(d, 0.1) if steps0 is None else np.asarray(steps0, dtype=float).copy()
    log_steps = np.log(steps)

    ga = gaussian_approximation(model, model.theta_from_internal(x), tol=1e-8)
    state = _State(model, x, ga.mode)
    lt = state.log_target(x)

    n_keep = (iterations - burn_in) // thin
    keep_theta = np.empty((n_keep, d))
    keep_mu = np.empty((n_keep, model.dim))
    acc_h = np.zeros(d)
    acc_h_batch = np.zeros(d)
    acc_mu = 0
    n_post = 0
    k = 0
    for it in range(iterations):
        # hyperparameters, one coordinate at a time
        if fixed_theta is None:
            for j in range(d):
                prop = state.x.copy()
                prop[j] += math.exp(log_steps[j]) * rng.standard_normal()
                try:
                    lp = state.log_target(prop)
                except (InvalidHyperparameterError, OverflowError, ValueError):
                    lp = -np.inf
                if math.log(rng.random()) < lp - lt:
                    state.x, lt = prop, lp
                    acc_h_batch[j] += 1
                    if it >= burn_in:
                        acc_h[j] += 1
        # latent field: independence proposal from the Gaussian approximation
        theta = model.theta_from_internal(state.x)
        try:
            ga = gaussian_approximation(model, theta, mu0=ga.mode, tol=1e-6)
        except (ConvergenceError, NotPositiveDefiniteError):
            ga = None
        if ga is not None:
            C_prior = global_prior_precision(model, theta)
            f = ga.factor
            nU = model.layout.n_U
            prop = ga.sample(1, rng)[0]
            dp, dc = prop - ga.mode, state.mu - ga.mode
            log_w_prop = _latent_log_density(model, theta, prop, C_prior) + 0.5 * f.quad(dp[:nU], dp[nU:])
            log_w_cur = _latent_log_density(model, theta, state.mu, C_prior) + 0.5 * f.quad(dc[:nU], dc[nU:])
            if math.log(rng.random()) < log_w_prop - log_w_cur:
                state.mu = prop
                state.refresh_mu()
                if it >= burn_in:
                    acc_mu += 1
        lt = state.log_target(state.x)

        if it < burn_in and fixed_theta is None and (it + 1) % adapt_every == 0:
            rate = acc_h_batch / adapt_every
            gain = min(0.5, 1.0 / math.sqrt((it + 1) / adapt_every))
            log_steps += gain * (rate - TARGET_ACCEPT)
            acc_h_batch[:] = 0
        if it >= burn_in:
            n_post += 1
            if n_post % thin == 0 and k < n_keep:
                keep_theta[k] = state.x
                keep_mu[k] = state.mu
                k += 1

    acceptance = {"latent": acc_mu / max(n_post, 1)}
    for j, n in enumerate(names):
        acceptance[n] = float(acc_h[j] / max(n_post, 1)) if fixed_theta is None else float("nan")
    return ChainResult(
        hyper_names=names,
        theta=keep_theta,
        latent=keep_mu,
        acceptance=acceptance,
        seed=seed if isinstance(seed, (int, type(None))) else None,
        iterations=iterations,
        burn_in=burn_in,
        thin=thin,
        steps=np.exp(log_steps),
        model=model,
    )


# --------------------------------------------------------------------------
# diagnostics


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = len(x)
    y = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, m)
    ac = np.fft.irfft(f * np.conj(f), m)[:n]
    return ac / ac[0]


def effective_sample_size(x) -> tuple[float, bool]:
    """Initial monotone sequence estimator of the effective sample size.

    Returns:
        (ess, degenerate) where ``degenerate`` flags a constant chain
        (reported with ESS 1).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2 or np.ptp(x) == 0:
        return 1.0, True
    rho = _autocorr(x)
    n_pairs = n // 2
    gam = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    neg = np.flatnonzero(gam <= 0)
    m = neg[0] if neg.size else len(gam)
    gam = np.minimum.accumulate(gam[:m])
    tau = -1.0 + 2.0 * gam.sum()
    tau = max(tau, 1.0 / n)
    return float(min(n / tau, n * math.log10(n))), False


@dataclass
class ChainDiagnostics:
    ess: dict
    degenerate: dict
    acceptance: dict
    trace_min: dict
    trace_max: dict


def diagnostics(chain: ChainResult, latent_names: list | None = None) -> ChainDiagnostics:
    """ESS, acceptance and trace extrema for hyperparameters and global effects."""
    if chain.G == 0:
        raise ModelSpecError("empty chain")
    cols = {n: chain.theta[:, j] for j, n in enumerate(chain.hyper_names)}
    if chain.model is not None:
        g = chain.global_draws()
        names = latent_names or chain.model.latent_names()
        all_names = chain.model.latent_names()
        for n in names:
            cols[n] = g[:, all_names.index(n)]
    ess, deg = {}, {}
    for n, x in cols.items():
        ess[n], deg[n] = effective_sample_size(x)
    return ChainDiagnostics(
        ess=ess,
        degenerate=deg,
        acceptance=dict(chain.acceptance),
        trace_min={n: float(x.min()) for n, x in cols.items()},
        trace_max={n: float(x.max()) for n, x in cols.items()},
    )
