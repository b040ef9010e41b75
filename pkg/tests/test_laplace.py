"""Gaussian approximation, arrow factorisation and hyperparameter integration."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy import linalg, sparse, stats

from stjm import laplace as L
from stjm._linalg import ArrowFactor
from stjm.errors import ConvergenceError
from stjm.model import HyperParams, ModelConfig, assemble_precision, build_model, global_prior_precision
from stjm.simulate import SimConfig, simulate

THETA = HyperParams(tau_Y=40.0, tau_U0=8.0, tau_U1=500.0, rho_01=-0.1, lam=0.3, tau_v=200.0, tau_u=5.0, tau_delta=20.0)


def dense_design(model):
    """Dense (n_rows x dim) longitudinal and survival design matrices."""
    d = model.design
    nU = model.layout.n_U
    AY = sparse.hstack([d.DU.T, d.YG]).toarray()
    AXU = d.DU.T.toarray()
    AXg = d.XG.toarray() if model.survival else None
    return AY, AXU, AXg, nU


@pytest.fixture(scope="module")
def tiny_panel():
    panel, _ = simulate(SimConfig(N=12, T_study=8, seed=5, nu0=-1.0))
    return panel


@pytest.fixture(scope="module")
def gauss_only(tiny_panel):
    return build_model(tiny_panel, variant="M1", config=ModelConfig(survival=False))


@pytest.fixture(scope="module")
def tiny_model(tiny_panel):
    return build_model(tiny_panel, variant="M1")


def null_basis(model):
    return linalg.null_space(model.constraints.rows) if model.constraints.k else np.eye(model.dim)


class TestBernoulli:
    def test_loglik_matches_pmf(self):
        eta = np.array([-3.0, 0.0, 2.5])
        x = np.array([1.0, 0.0, 1.0])
        p = 1 / (1 + np.exp(-eta))
        np.testing.assert_allclose(L.bernoulli_loglik(x, eta), stats.bernoulli.logpmf(x, p), atol=1e-14)

    def test_curvature_is_second_derivative(self):
        eta = np.random.default_rng(9).uniform(-4, 4, 20)
        h = 1e-4
        num = -(L.bernoulli_loglik(1.0, eta + h) - 2 * L.bernoulli_loglik(1.0, eta) + L.bernoulli_loglik(1.0, eta - h)) / h**2
        np.testing.assert_allclose(L.bernoulli_curvature(eta), num, atol=1e-6)


class TestGaussianOnly:
    def test_mode_is_dense_solve(self, gauss_only):
        m = gauss_only
        th = HyperParams(THETA.tau_Y, THETA.tau_U0, THETA.tau_U1, THETA.rho_01)
        ga = L.gaussian_approximation(m, th)
        AY, _, _, _ = dense_design(m)
        Q = assemble_precision(m, th).toarray() + th.tau_Y * AY.T @ AY
        mode = np.linalg.solve(Q, th.tau_Y * AY.T @ m.design.y)
        np.testing.assert_allclose(ga.mode, mode, rtol=1e-9, atol=1e-12)
        assert ga.n_iter == 1

    def test_evidence_is_exact_marginal(self, gauss_only):
        m = gauss_only
        th = HyperParams(THETA.tau_Y, THETA.tau_U0, THETA.tau_U1, THETA.rho_01)
        ga = L.gaussian_approximation(m, th)
        AY, _, _, _ = dense_design(m)
        cov = AY @ np.linalg.inv(assemble_precision(m, th).toarray()) @ AY.T + np.eye(len(AY)) / th.tau_Y
        exact = stats.multivariate_normal(np.zeros(len(AY)), cov).logpdf(m.design.y)
        prior = L.log_hyper_prior(th, m.priors, m.hyper_names)
        assert ga.log_marginal - prior == pytest.approx(exact, rel=1e-9)


class TestSurvivalMode:
    def test_constrained_stationarity(self, tiny_model):
        m = tiny_model
        ga = L.gaussian_approximation(m, THETA, tol=1e-10)
        np.testing.assert_allclose(m.constraints.rows @ ga.mode, 0, atol=1e-10)
        AY, AXU, AXg, nU = dense_design(m)
        d = m.design
        eta_X = np.concatenate([THETA.lam * AXU, AXg], axis=1) @ ga.mode
        AX = np.concatenate([THETA.lam * AXU, AXg], axis=1)
        grad = THETA.tau_Y * AY.T @ (d.y - AY @ ga.mode) + AX.T @ (d.x - 1 / (1 + np.exp(-eta_X)))
        grad -= assemble_precision(m, THETA).toarray() @ ga.mode
        N = null_basis(m)
        np.testing.assert_allclose(N.T @ grad, 0, atol=1e-7)

    def test_mode_matches_fixed_theta_chain_mean(self, tiny_model):
        from stjm.mcmc import run_mcmc

        m = tiny_model
        ga = L.gaussian_approximation(m, THETA, tol=1e-10)
        c = run_mcmc(m, iterations=3000, burn_in=200, thin=1, seed=4, fixed_theta=THETA.to_internal(m.hyper_names))
        sd = c.latent.std(axis=0)
        keep = sd > 1e-8
        z = np.abs(c.latent.mean(axis=0) - ga.mode)[keep] / sd[keep]
        assert z.max() < 0.5

    def test_evidence_shifts_with_log_prior_constant(self, tiny_model, monkeypatch):
        base = L.log_posterior_hyper(tiny_model, THETA)
        shifted_prior = L.log_hyper_prior
        monkeypatch.setattr(L, "log_hyper_prior", lambda *a, **k: shifted_prior(*a, **k) + 7.5)
        assert L.log_posterior_hyper(tiny_model, THETA) == pytest.approx(base + 7.5, abs=1e-8)

    def test_warm_start_agrees(self, tiny_model):
        a = L.gaussian_approximation(tiny_model, THETA, tol=1e-10)
        b = L.gaussian_approximation(tiny_model, THETA, mu0=a.mode + 0.01, tol=1e-10)
        np.testing.assert_allclose(a.mode, b.mode, atol=1e-8)
        assert a.log_marginal == pytest.approx(b.log_marginal, abs=1e-6)

    def test_iteration_cap(self, tiny_model):
        with pytest.raises(ConvergenceError) as err:
            L.gaussian_approximation(tiny_model, THETA, tol=1e-14, max_iter=1)
        assert len(err.value.trace) == 1

    def test_precision_property_is_posterior_hessian(self, tiny_model):
        m = tiny_model
        ga = L.gaussian_approximation(m, THETA, tol=1e-10)
        AY, AXU, AXg, _ = dense_design(m)
        AX = np.concatenate([THETA.lam * AXU, AXg], axis=1)
        p = 1 / (1 + np.exp(-(AX @ ga.mode)))
        H = assemble_precision(m, THETA).toarray() + THETA.tau_Y * AY.T @ AY + AX.T @ np.diag(p * (1 - p)) @ AX
        np.testing.assert_allclose(ga.precision.toarray(), H, rtol=1e-7, atol=1e-7)


@pytest.fixture(scope="module")
def pieces(tiny_model):
    ga = L.gaussian_approximation(tiny_model, THETA, tol=1e-10)
    return tiny_model, ga, ga.precision.toarray()


class TestArrowFactor:
    def test_solve_matches_dense(self, pieces, rng):
        m, ga, _ = pieces
        f = ga.factor
        D, B, C, A = L._assemble(m, THETA, ga.curvature, global_prior_precision(m, THETA))
        nU = m.layout.n_U
        full = np.zeros((m.dim, m.dim))
        for i in range(m.N):
            full[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = D[i]
        full[:nU, nU:] = B
        full[nU:, :nU] = B.T
        full[nU:, nU:] = C
        r = rng.standard_normal(m.dim)
        xU, xg = f.solve(r[:nU], r[nU:])
        np.testing.assert_allclose(np.concatenate([xU, xg]), np.linalg.solve(full, r), rtol=1e-8, atol=1e-10)
        assert f.logdet == pytest.approx(np.linalg.slogdet(full)[1], rel=1e-10)
        x = rng.standard_normal(m.dim)
        assert f.quad(x[:nU], x[nU:]) == pytest.approx(x @ full @ x, rel=1e-10)

    def test_constrained_pieces_match_basis_oracle(self, pieces):
        m, ga, Q = pieces
        f = ga.factor
        N = null_basis(m)
        R = N.T @ Q @ N
        assert f.constrained_logdet() == pytest.approx(np.linalg.slogdet(R)[1], rel=1e-9)
        cov = N @ np.linalg.inv(R) @ N.T
        nU = m.layout.n_U
        np.testing.assert_allclose(f.global_cov(), cov[nU:, nU:], rtol=1e-6, atol=1e-10)

    def test_samples(self, pieces):
        m, ga, Q = pieces
        rng = np.random.default_rng(8)
        x = ga.sample(40000, rng)
        np.testing.assert_allclose(x @ m.constraints.rows.T, 0, atol=1e-9)
        N = null_basis(m)
        cov = N @ np.linalg.inv(N.T @ Q @ N) @ N.T
        nU = m.layout.n_U
        g = x[:, nU:]
        sd = np.sqrt(np.diag(cov)[nU:])
        np.testing.assert_array_less(np.abs(g.mean(0) - ga.mode_global), 5 * sd / math.sqrt(len(g)) + 1e-12)
        np.testing.assert_allclose(g.std(0), sd, rtol=0.03)

    def test_rejects_indefinite_block(self):
        from stjm.errors import NotPositiveDefiniteError

        D = np.array([[[1.0, 0.0], [0.0, -1.0]]])
        with pytest.raises(NotPositiveDefiniteError) as err:
            ArrowFactor(D, np.zeros((2, 1)), np.eye(1), np.zeros((0, 1)))
        assert err.value.pivot == 1


class TestDesigns:
    @pytest.mark.parametrize("d", range(2, 11))
    def test_factorial_is_orthogonal_and_balanced(self, d):
        F = L.fractional_factorial(d)
        assert set(np.unique(F)) == {-1.0, 1.0}
        np.testing.assert_array_equal(F.sum(axis=0), 0)
        np.testing.assert_array_equal(F.T @ F, len(F) * np.eye(d))

    @pytest.mark.parametrize("d", range(5, 11))
    def test_factorial_is_resolution_five(self, d):
        F = L.fractional_factorial(d)
        pairs = [F[:, i] * F[:, j] for i, j in itertools.combinations(range(d), 2)]
        E = np.column_stack([F] + pairs)
        np.testing.assert_array_equal(E.T @ E, len(F) * np.eye(E.shape[1]))

    @pytest.mark.parametrize("d", range(2, 11))
    def test_ccd_reproduces_normal_second_moments(self, d):
        Z, delta = L.ccd_design(d)
        w = delta * np.exp(-0.5 * np.sum(Z**2, axis=1))
        w /= w.sum()
        np.testing.assert_allclose(w @ Z, 0, atol=1e-12)
        np.testing.assert_allclose((Z * w[:, None]).T @ Z, np.eye(d), atol=1e-12)

    def test_numeric_hessian_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        H = L.numeric_hessian(lambda x: -0.5 * x @ A @ x + x[0], np.array([0.3, -0.2]))
        np.testing.assert_allclose(H, -A, atol=1e-9)


class TestFit:
    def test_weights_and_summaries(self, small_fit, small_model):
        f = small_fit
        assert f.strategy == "ccd"
        assert f.weights.sum() == pytest.approx(1.0)
        assert np.all(f.weights >= 0)
        names = list(f.summaries)
        assert names[: len(small_model.hyper_names)] == list(small_model.hyper_names)
        assert len(names) == len(small_model.hyper_names) + small_model.layout.n_global
        for mean, sd, q1, q2, q3 in f.summaries.values():
            assert sd >= 0 and q1 <= q2 <= q3

    def test_recovers_fixed_effects(self, small_fit, small_panel):
        truth = small_panel[1]
        s = small_fit.summaries
        for name, val in (("beta_01", truth.beta01), ("beta_11", truth.beta11), ("nu0", truth.nu0), ("lambda", 0.2)):
            mean, sd = s[name][:2]
            assert abs(mean - val) < 4 * sd, name

    def test_empirical_bayes_single_point(self, small_model):
        f = L.fit(small_model, grid_strategy="eb")
        assert len(f.grid) == 1
        assert f.weights[0] == 1.0
        _, x = L.sample_latent(f, 4000, seed=3)
        ga = f.grid[0].ga
        sd = x.std(axis=0)
        keep = sd > 1e-8
        assert np.all(np.abs(x.mean(axis=0) - ga.mode)[keep] < 5 * sd[keep] / np.sqrt(4000))

    def test_unknown_strategy(self, small_model):
        with pytest.raises(ValueError):
            L.fit(small_model, grid_strategy="sobol")

    def test_grid_strategy_on_longitudinal_model(self, small_panel):
        m = build_model(small_panel[0], config=ModelConfig(survival=False))
        f = L.fit(m)
        assert f.strategy == "grid"
        assert len(f.grid) > 1
        mean, sd = f.summaries["tau_Y"][:2]
        assert abs(mean - small_panel[1].theta["tau_Y"]) < 4 * sd

    def test_summary_csv(self, small_fit, tmp_path):
        small_fit.write_summary(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == ",".join(L.SUMMARY_HEADER)
        assert len(lines) == 1 + len(small_fit.summaries)

    def test_grid_point_counts_follow_weights(self, small_fit):
        w, _ = L.sample_latent(small_fit, 10_000, seed=5, with_U=False)
        counts = np.bincount(w, minlength=len(small_fit.grid))
        expected = 10_000 * small_fit.weights
        big = expected >= 5
        pooled = np.append(counts[big], counts[~big].sum())
        exp_pooled = np.append(expected[big], expected[~big].sum())
        keep = exp_pooled > 0
        assert stats.chisquare(pooled[keep], exp_pooled[keep]).pvalue > 1e-3

    @pytest.mark.slow
    def test_tau_v_sweep_peak_inside_chain_quartiles(self):
        from stjm.mcmc import run_mcmc

        panel, _ = simulate(SimConfig(N=20, T_study=24, seed=13))
        m = build_model(panel, variant="M1")
        f = L.fit(m, grid_strategy="eb")
        k = m.hyper_names.index("tau_v")
        grid = np.linspace(2.0, 14.0, 25)
        vals = [L.log_posterior_hyper(m, HyperParams.from_internal(np.r_[f.mode_internal[:k], g, f.mode_internal[k + 1 :]], m.hyper_names)) for g in grid]
        peak = grid[int(np.argmax(vals))]
        c = run_mcmc(m, iterations=6000, burn_in=1000, thin=1, seed=2, theta0=f.mode_internal)
        q1, q3 = np.percentile(c.theta[:, k], [25, 75])
        assert q1 <= peak <= q3

    def test_sample_latent(self, small_fit, small_model):
        w, x = L.sample_latent(small_fit, 400, seed=1)
        assert x.shape == (400, small_model.dim)
        np.testing.assert_allclose(x @ small_model.constraints.rows.T, 0, atol=1e-8)
        w2, x2 = L.sample_latent(small_fit, 400, seed=1)
        np.testing.assert_array_equal(x, x2)
        _, g = L.sample_latent(small_fit, 5, seed=2, with_U=False)
        assert g.shape == (5, small_model.layout.n_global)
