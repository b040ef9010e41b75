"""Shared fixtures: small simulated panels, graphs and fitted models."""

from __future__ import annotations

import numpy as np
import pytest

from stjm.gmrf import AdjacencyGraph
from stjm.laplace import fit
from stjm.model import ModelConfig, build_model
from stjm.simulate import SimConfig, simulate

_ACCEPTANCE_KEY = "_stjm_acceptance_lines"


def pytest_configure(config):
    setattr(config, _ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, _ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"AC{number} {'PASS' if ok else 'FAIL'}: {detail}"
        getattr(request.config, _ACCEPTANCE_KEY).append(line)
        print(line)

    return record


@pytest.fixture(scope="session")
def lattice3():
    return AdjacencyGraph.lattice(3, 3)


@pytest.fixture(scope="session")
def small_panel():
    """60 loans over 24 months from the temporal design."""
    panel, truth = simulate(SimConfig(N=60, T_study=24, seed=11))
    return panel, truth


@pytest.fixture(scope="session")
def spatial_panel(lattice3):
    panel, truth = simulate(SimConfig(N=80, T_study=20, seed=12, graph=lattice3))
    return panel, truth


@pytest.fixture(scope="session")
def small_model(small_panel):
    return build_model(small_panel[0], variant="M1")


@pytest.fixture(scope="session")
def small_fit(small_model):
    return fit(small_model)


@pytest.fixture(scope="session")
def spatial_models(spatial_panel, lattice3):
    panel = spatial_panel[0]
    return {v: build_model(panel, lattice3, variant=v, config=ModelConfig(variant=v)) for v in ("M1", "M2", "M3")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_graph(rng, n_areas: int, p: float = 0.4, connected: bool = False) -> AdjacencyGraph:
    """Erdos-Renyi graph on 1..n_areas; optionally chained to be connected."""
    pairs = set()
    for a in range(1, n_areas + 1):
        for b in range(a + 1, n_areas + 1):
            if rng.random() < p:
                pairs.add((a, b))
    if connected:
        order = rng.permutation(n_areas) + 1
        for a, b in zip(order[:-1], order[1:]):
            pairs.add((int(min(a, b)), int(max(a, b))))
    return AdjacencyGraph(n_areas, frozenset(pairs))
