"""Synthetic data generator."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from stjm.data import load_panel
from stjm.errors import ModelSpecError
from stjm.gmrf import AdjacencyGraph
from stjm.simulate import DEFAULT_THETA, SimConfig, Truth, simulate, write_dataset

QUIET = replace(DEFAULT_THETA, lam=0.0, tau_v=1e12)


def morans_i(x: np.ndarray, graph: AdjacencyGraph) -> float:
    W = graph.adjacency_matrix().toarray()
    d = x - x.mean()
    return len(x) / W.sum() * (d @ W @ d) / (d @ d)


class TestEventProcess:
    def test_no_events_with_tiny_hazard(self):
        p, _ = simulate(SimConfig(N=300, T_study=20, nu0=-30.0, theta=QUIET, seed=1))
        assert p.event.sum() == 0
        assert np.all(p.duration == 20)

    def test_geometric_durations_at_even_odds(self):
        cfg = SimConfig(N=10_000, T_study=40, nu0=0.0, beta2=(0.0, 0.0), v_slope=0.0, theta=QUIET, seed=2)
        p, _ = simulate(cfg)
        # geometric(1/2): mean 2, sd sqrt(2)
        assert p.duration.mean() == pytest.approx(2.0, abs=4 * np.sqrt(2 / 10_000))
        assert p.event.all()

    def test_default_risk_set_sizes(self):
        target = np.array([424, 347, 183, 85, 36])
        counts = [[simulate(SimConfig(seed=s))[0].n_at_risk(t) for t in (12, 18, 24, 30, 36)] for s in range(5)]
        np.testing.assert_array_less(np.abs(np.mean(counts, axis=0) / target - 1), 0.25)

    def test_censoring_and_outcome_rows(self, small_panel):
        p, truth = small_panel
        assert p.n_rows == p.duration.sum()
        assert np.all(p.duration[p.event == 0] == p.T)
        assert truth.T_study == p.T


class TestLongitudinalProcess:
    def test_regression_recovers_loan_lines(self):
        th = replace(DEFAULT_THETA, tau_Y=1e8)
        p, truth = simulate(SimConfig(N=20, T_study=10, nu0=-30.0, theta=th, seed=3))
        U = np.array(truth.U)
        for i in range(5):
            s = p.row_s[p.loan_rows(i)]
            np.testing.assert_allclose(p.row_y[p.loan_rows(i)], truth.beta01 + U[i, 0] + (truth.beta11 + U[i, 1]) * s, atol=1e-3)

    def test_random_effect_covariance(self):
        th = replace(DEFAULT_THETA, rho_01=0.6)
        _, truth = simulate(SimConfig(N=5000, T_study=5, theta=th, seed=4))
        U = np.array(truth.U)
        np.testing.assert_allclose(np.cov(U.T), th.cov_U(), rtol=0.1, atol=1e-5)


class TestSpatial:
    def test_huge_precision_flattens_area_effect(self):
        th = replace(DEFAULT_THETA, tau_u=1e6)
        _, truth = simulate(SimConfig(N=100, T_study=10, theta=th, graph=AdjacencyGraph.lattice(3, 3), spatial_interaction=False, seed=5))
        assert np.max(np.abs(truth.u)) < 0.02
        assert truth.delta is None

    def test_flat_area_effect_matches_temporal_design(self):
        th = replace(DEFAULT_THETA, tau_u=1e6)
        g = AdjacencyGraph.lattice(3, 3)
        a, _ = simulate(SimConfig(N=2000, T_study=20, theta=th, graph=g, spatial_interaction=False, seed=9))
        b, _ = simulate(SimConfig(N=2000, T_study=20, theta=th, seed=9))
        # shared substreams: only the negligible u shifts the hazard
        assert np.mean(a.duration == b.duration) > 0.99
        np.testing.assert_array_equal(a.Z, b.Z)

    def test_area_effect_is_spatially_smooth(self):
        g = AdjacencyGraph.lattice(5, 5)
        th = replace(DEFAULT_THETA, tau_u=1.0)
        p, truth = simulate(SimConfig(N=5000, T_study=12, theta=th, graph=g, spatial_interaction=False, seed=6))
        u = np.array(truth.u)
        assert abs(u.sum()) < 1e-8
        # a single draw can be rough, the average over draws is clearly positive
        draws = [simulate(SimConfig(N=25, T_study=3, theta=th, graph=g, spatial_interaction=False, seed=k))[1].u for k in range(40)]
        assert np.mean([morans_i(np.array(d), g) for d in draws]) > 0.15
        rate = np.array([p.event[p.area == a].mean() for a in range(1, 26)])
        assert stats.spearmanr(rate, u).statistic > 0.5

    def test_area_counts_uniform_by_default(self):
        p, _ = simulate(SimConfig(N=4500, T_study=5, graph=AdjacencyGraph.lattice(3, 3), seed=10))
        counts = np.bincount(p.area, minlength=10)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_area_counts_follow_weights(self):
        g = AdjacencyGraph.lattice(1, 3)
        p, _ = simulate(SimConfig(N=6000, T_study=5, graph=g, area_weights=(1, 2, 3), seed=7))
        counts = np.bincount(p.area, minlength=4)[1:]
        expected = 6000 * np.array([1, 2, 3]) / 6
        assert stats.chisquare(counts, expected).pvalue > 1e-3

    def test_interaction_shape(self, spatial_panel):
        _, truth = spatial_panel
        assert len(truth.delta) == 20 * 9
        assert abs(np.sum(truth.delta)) < 1e-8


class TestReproducibility:
    def test_same_seed_same_data(self):
        a, _ = simulate(SimConfig(N=50, T_study=12, seed=8))
        b, _ = simulate(SimConfig(N=50, T_study=12, seed=8))
        np.testing.assert_array_equal(a.row_y, b.row_y)
        np.testing.assert_array_equal(a.duration, b.duration)

    def test_seed_required(self):
        with pytest.raises(ModelSpecError):
            SimConfig(N=10)
        with pytest.raises(ModelSpecError):
            SimConfig.from_dict({"N": 10})

    def test_unknown_key(self):
        with pytest.raises(ModelSpecError):
            SimConfig.from_dict({"seed": 1, "colour": 3})

    def test_from_dict(self):
        cfg = SimConfig.from_dict({"seed": 1, "lattice": [2, 3], "theta": {"lambda": 0.7}, "beta2": [0.5]})
        assert cfg.graph.n_areas == 6
        assert cfg.theta.lam == 0.7
        assert cfg.beta2 == (0.5,)

    def test_write_round_trip(self, spatial_panel, lattice3, tmp_path):
        p, truth = spatial_panel
        paths = write_dataset(p, truth, tmp_path, lattice3)
        assert {q.name for q in paths} == {"origination.csv", "performance.csv", "truth.json", "adjacency.txt"}
        back = load_panel(tmp_path, T_study=p.T)
        np.testing.assert_allclose(back.row_y, p.row_y, rtol=1e-12)
        np.testing.assert_array_equal(back.duration, p.duration)
        np.testing.assert_array_equal(back.event, p.event)
        np.testing.assert_array_equal(back.area, p.area)
        np.testing.assert_allclose(back.Z, p.Z, rtol=1e-12)
        assert Truth.from_json(tmp_path / "truth.json").u == truth.u


@pytest.mark.slow
def test_correct_model_recovers_fixed_effects():
    """Each fixed effect lies within 3 posterior sd of its true value in at least 18 of 20 datasets."""
    from stjm.laplace import fit
    from stjm.model import build_model

    names = ("beta_01", "beta_11", "nu0", "beta2[z1]", "beta2[z2]")
    hits = dict.fromkeys(names, 0)
    for seed in range(20):
        panel, truth = simulate(SimConfig(N=300, seed=200 + seed))
        s = fit(build_model(panel, variant="M1")).summaries
        true = dict(zip(names, (truth.beta01, truth.beta11, truth.nu0, *truth.beta2)))
        for n in names:
            hits[n] += abs(s[n][0] - true[n]) <= 3 * s[n][1]
    assert min(hits.values()) >= 18, hits
