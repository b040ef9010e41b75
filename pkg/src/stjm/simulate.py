"""Synthetic joint longitudinal/survival data.

Longitudinal process::

    y_is = beta_01 + U0_i + (beta_11 + U1_i) s + eps_is,   eps ~ N(0, 1/tau_Y)

Event process (discrete-time logit hazard)::

    eta_is = nu0 + v_s [+ u_a + delta_as] + z_i' beta2 + lambda (U0_i + U1_i s)

Events are drawn month by month; loans still alive at ``T_study`` are
censored. The default configuration was tuned by pilot simulation so that,
with N = 500 and T = 40, the numbers at risk after months 12, 18, 24, 30 and 36
are close to 424, 347, 183, 85 and 36.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import gmrf
from .data import LoanRecord, PanelDataset, balance_from_outcome, write_loans
from .errors import ModelSpecError
from .gmrf import AdjacencyGraph
from .model import HyperParams

DEFAULT_THETA = HyperParams(
    tau_Y=50.0, tau_U0=10.0, tau_U1=900.0, rho_01=-0.07, lam=0.2, tau_v=1e4, tau_u=10.0, tau_delta=100.0
)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Attributes:
        N: number of loans.
        T_study: administrative censoring month.
        theta: true hyperparameters (tau_u / tau_delta used only with a graph).
        beta01, beta11: longitudinal fixed effects.
        nu0: baseline log-odds level.
        beta2: survival coefficients for the covariates z_1..z_p.
        v_slope: linear trend of v per month, centred so that sum(v) = 0.
        graph: adjacency graph for the spatial extension.
        area_weights: optional area sampling probabilities.
        spatial_interaction: draw delta as well as u.
        seed: master seed.
    """

    N: int = 500
    T_study: int = 40
    theta: HyperParams = DEFAULT_THETA
    beta01: float = 0.01
    beta11: float = 0.025
    nu0: float = -2.35
    beta2: tuple = (1.0, 1.0)
    v_slope: float = 0.18
    graph: AdjacencyGraph | None = None
    area_weights: tuple | None = None
    spatial_interaction: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ModelSpecError("N must be positive")
        if self.T_study < 3:
            raise ModelSpecError("T_study must be >= 3")
        if self.seed is None:
            raise ModelSpecError("seed required")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "seed" not in d or d["seed"] is None:
            raise ModelSpecError("seed required")
        theta = DEFAULT_THETA
        if "theta" in d:
            t = dict(d.pop("theta"))
            if "lambda" in t:
                t["lam"] = t.pop("lambda")
            theta = replace(DEFAULT_THETA, **t)
        graph = None
        if "lattice" in d:
            rows, cols = d.pop("lattice")
            graph = AdjacencyGraph.lattice(int(rows), int(cols))
        elif "adjacency" in d:
            graph = gmrf.read_adjacency(d.pop("adjacency"))
        known = {f for f in cls.__dataclass_fields__} - {"theta", "graph"}
        unknown = set(d) - known
        if unknown:
            raise ModelSpecError(f"unknown simulation keys: {sorted(unknown)}")
        if "beta2" in d:
            d["beta2"] = tuple(float(b) for b in d["beta2"])
        if d.get("area_weights") is not None:
            d["area_weights"] = tuple(d["area_weights"])
        return cls(theta=theta, graph=graph, **d)


@dataclass
class Truth:
    """Realised parameters of a simulated dataset."""

    theta: dict
    beta01: float
    beta11: float
    nu0: float
    beta2: list
    v: list
    U: list
    u: list | None = None
    delta: list | None = None
    T_study: int = 0
    covariates: list = field(default_factory=list)
    seed: int | None = None

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path) -> "Truth":
        return cls(**json.loads(Path(path).read_text()))


def _streams(seed):
    names = ("v", "u", "delta", "U", "Z", "area", "eps", "event")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _intrinsic_draw(R, tau: float, rng) -> np.ndarray:
    """Draw from an intrinsic GMRF with every null-space direction set to zero."""
    Q = gmrf.jitter(R * tau, tau)
    cons = gmrf.null_space_constraints(R)
    return gmrf.sample_constrained_gaussian(Q, 0.0, cons, 1, rng)[0]


def _simulate(config: SimConfig, spatial: bool):
    rng = _streams(config.seed)
    th = config.theta
    N, T = config.N, config.T_study
    s = np.arange(1, T + 1, dtype=float)
    v = _intrinsic_draw(gmrf.build_rw2_structure(T), th.tau_v, rng["v"])
    v = v + config.v_slope * (s - s.mean())

    cov = th.cov_U()
    U = rng["U"].multivariate_normal(np.zeros(2), cov, size=N, method="cholesky")
    p = len(config.beta2)
    Z = rng["Z"].standard_normal((N, p))

    base = np.broadcast_to(config.nu0 + v, (N, T)).copy()
    u = delta = None
    area = np.ones(N, dtype=int)
    if spatial:
        graph = config.graph
        A = graph.n_areas
        probs = None if config.area_weights is None else np.asarray(config.area_weights, float) / np.sum(config.area_weights)
        area = rng["area"].choice(A, size=N, p=probs) + 1
        Ru = gmrf.build_icar_structure(graph)
        u = _intrinsic_draw(Ru, th.tau_u, rng["u"])
        base += u[area - 1][:, None]
        if config.spatial_interaction:
            Rd = gmrf.build_interaction_structure(gmrf.build_rw2_structure(T), Ru)
            delta = _intrinsic_draw(Rd, th.tau_delta, rng["delta"])
            base += delta.reshape(T, A)[:, area - 1].T

    eta = base + (Z @ np.asarray(config.beta2))[:, None] + th.lam * (U[:, :1] + U[:, 1:] * s)
    draws = rng["event"].random((N, T)) < expit(eta)
    hit = draws.any(axis=1)
    duration = np.where(hit, draws.argmax(axis=1) + 1, T)
    event = hit.astype(int)

    eps = rng["eps"].standard_normal((N, T)) / np.sqrt(th.tau_Y)
    Y = config.beta01 + U[:, :1] + (config.beta11 + U[:, 1:]) * s + eps
    mask = s[None, :] <= duration[:, None]
    names = tuple(f"z{j + 1}" for j in range(p))
    panel = PanelDataset.from_arrays(duration, event, Y[mask], Z, names, T, area=area)
    truth = Truth(
        theta=th.as_dict(),
        beta01=config.beta01,
        beta11=config.beta11,
        nu0=config.nu0,
        beta2=list(config.beta2),
        v=v.tolist(),
        U=U.tolist(),
        u=None if u is None else u.tolist(),
        delta=None if delta is None else delta.tolist(),
        T_study=T,
        covariates=list(names),
        seed=config.seed,
    )
    return panel, truth


def simulate_nonspatial(config: SimConfig) -> tuple[PanelDataset, Truth]:
    """Temporal-only design: baseline nu0 + v_s and covariates z."""
    return _simulate(config, spatial=False)


def simulate_stjm(config: SimConfig) -> tuple[PanelDataset, Truth]:
    """Spatial extension: adds an ICAR area effect and (optionally) an interaction."""
    if config.graph is None:
        raise ModelSpecError("spatial simulation needs a graph")
    return _simulate(config, spatial=True)


def simulate(config: SimConfig) -> tuple[PanelDataset, Truth]:
    return simulate_stjm(config) if config.graph is not None else simulate_nonspatial(config)


def panel_to_loans(panel: PanelDataset, int_rt: float = 4.0, term: int = 360, orig_upb: float = 200000.0) -> list[LoanRecord]:
    """Wrap a simulated panel as loan records for the CSV round trip.

    Balances are the inverse outcome transform clipped to [0, P0]; the exact
    outcome travels alongside in the ``y`` column. Simulated covariates are
    written as extra origination columns.
    """
    loans = []
    i_m = int_rt / 1200.0
    for i in range(panel.N):
        sl = panel.loan_rows(i)
        y = panel.row_y[sl]
        bal = np.clip(balance_from_outcome(y, orig_upb, i_m, term, panel.T), 0.0, orig_upb)
        loans.append(
            LoanRecord(
                loan_id=str(panel.loan_ids[i]),
                area=int(panel.area[i]),
                orig_date="2017-01",
                term=term,
                int_rt=int_rt,
                orig_upb=orig_upb,
                cltv=80.0,
                cnt_units=1,
                dti=35.0,
                loan_purpose="P",
                cnt_borr=1,
                extra={name: float(panel.Z[i, j]) for j, name in enumerate(panel.covariate_names)},
                months=panel.row_s[sl].copy(),
                balances=bal,
                y=y.copy(),
                event=int(panel.event[i]),
            )
        )
    return loans


def write_dataset(panel: PanelDataset, truth: Truth, out_dir, graph: AdjacencyGraph | None = None) -> list[Path]:
    """Write origination/performance CSVs, the truth file and (if spatial) the adjacency file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "origination.csv", out / "performance.csv", out / "truth.json"]
    write_loans(panel_to_loans(panel), paths[0], paths[1])
    truth.to_json(paths[2])
    if graph is not None:
        paths.append(out / "adjacency.txt")
        gmrf.write_adjacency(graph, paths[3])
    return paths
