"""Metropolis-within-Gibbs sampler and chain diagnostics."""

from __future__ import annotations

import json

import numpy as np
import pytest

from stjm.errors import ModelSpecError
from stjm.laplace import gaussian_approximation
from stjm.mcmc import diagnostics, effective_sample_size, run_mcmc
from stjm.model import HyperParams, ModelConfig, build_model
from stjm.simulate import SimConfig, simulate


@pytest.fixture(scope="module")
def short_chain(small_model):
    return run_mcmc(small_model, iterations=300, burn_in=100, thin=2, seed=7)


class TestEffectiveSampleSize:
    def test_iid(self):
        x = np.random.default_rng(1).standard_normal(4000)
        ess, deg = effective_sample_size(x)
        assert not deg
        assert ess == pytest.approx(4000, rel=0.1)

    def test_ar1(self):
        rng = np.random.default_rng(2)
        phi, n = 0.9, 20000
        x = np.empty(n)
        x[0] = rng.standard_normal()
        for k in range(1, n):
            x[k] = phi * x[k - 1] + rng.standard_normal()
        ess, _ = effective_sample_size(x)
        assert ess == pytest.approx(n * (1 - phi) / (1 + phi), rel=0.3)

    def test_ar1_half(self):
        rng = np.random.default_rng(3)
        phi, n = 0.5, 100_000
        e = rng.standard_normal(n)
        x = np.empty(n)
        x[0] = e[0] / np.sqrt(1 - phi**2)
        for k in range(1, n):
            x[k] = phi * x[k - 1] + e[k]
        assert effective_sample_size(x)[0] == pytest.approx(n * (1 - phi) / (1 + phi), rel=0.2)

    def test_constant_chain(self):
        assert effective_sample_size(np.ones(50)) == (1.0, True)


class TestRunMcmc:
    def test_shapes_and_rates(self, short_chain, small_model):
        c = short_chain
        assert c.G == 100
        assert c.theta.shape == (100, len(small_model.hyper_names))
        assert c.latent.shape == (100, small_model.dim)
        for rate in c.acceptance.values():
            assert 0.0 <= rate <= 1.0
        np.testing.assert_allclose(c.latent @ small_model.constraints.rows.T, 0, atol=1e-8)

    def test_seed_reproducibility(self, small_model, short_chain):
        again = run_mcmc(small_model, iterations=300, burn_in=100, thin=2, seed=7)
        np.testing.assert_array_equal(again.theta, short_chain.theta)
        np.testing.assert_array_equal(again.latent, short_chain.latent)

    def test_exact_proposal_is_always_accepted(self, small_panel):
        m = build_model(small_panel[0], config=ModelConfig(survival=False))
        th = HyperParams(50.0, 10.0, 900.0, -0.07)
        x = th.to_internal(m.hyper_names)
        c = run_mcmc(m, iterations=200, burn_in=0, thin=1, seed=3, fixed_theta=x)
        assert c.acceptance["latent"] == 1.0
        ga = gaussian_approximation(m, th)
        sd = np.sqrt(np.diag(ga.factor.global_cov()))
        z = (c.global_draws().mean(axis=0) - ga.mode_global) / (sd / np.sqrt(c.G))
        assert np.all(np.abs(z) < 5)

    def test_fixed_theta_stays_fixed(self, small_model):
        x = np.array([3.9, 2.3, 6.8, -0.07, 0.2, 9.2])
        c = run_mcmc(small_model, iterations=20, burn_in=5, thin=1, seed=1, fixed_theta=x)
        np.testing.assert_array_equal(c.theta, np.tile(x, (15, 1)))

    @pytest.mark.parametrize("kw", [{"iterations": 10, "burn_in": 10}, {"thin": 0}, {"burn_in": -1}])
    def test_bad_settings(self, small_model, kw):
        args = {"iterations": 20, "burn_in": 5, "thin": 1}
        args.update(kw)
        with pytest.raises(ModelSpecError):
            run_mcmc(small_model, seed=1, **args)

    def test_summaries_cover_hyper_and_global(self, short_chain, small_model):
        s = short_chain.summaries()
        assert set(small_model.hyper_names) <= set(s)
        assert set(small_model.latent_names()) <= set(s)
        mean, sd, lo, med, hi = s["tau_Y"]
        assert mean > 0 and lo <= med <= hi

    def test_export(self, short_chain, tmp_path):
        npz, man = short_chain.export(tmp_path / "chain")
        with np.load(npz) as z:
            np.testing.assert_array_equal(z["theta"], short_chain.theta)
        meta = json.loads(man.read_text())
        assert meta["seed"] == 7 and meta["thin"] == 2


@pytest.mark.slow
def test_lambda_interval_coverage():
    """95% intervals for lambda cover the true 0.2 in at least 18 of 20 simulated datasets."""
    from stjm.laplace import fit

    covered = 0
    for seed in range(20):
        panel, _ = simulate(SimConfig(N=100, seed=100 + seed))
        m = build_model(panel, variant="M1")
        f = fit(m, grid_strategy="eb")
        c = run_mcmc(m, iterations=2500, burn_in=500, thin=1, seed=seed, theta0=f.mode_internal)
        lo, hi = np.percentile(c.theta[:, m.hyper_names.index("lambda")], [2.5, 97.5])
        covered += lo <= 0.2 <= hi
    assert covered >= 18


class TestDiagnostics:
    def test_keys(self, short_chain):
        d = diagnostics(short_chain, ["nu0"])
        assert set(d.ess) == set(short_chain.hyper_names) | {"nu0"}
        assert d.trace_min["nu0"] <= d.trace_max["nu0"]
        assert d.acceptance == short_chain.acceptance
