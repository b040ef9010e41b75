"""Latent Gaussian formulation of the joint longitudinal/survival model.

Latent field layout (in order)::

    U      2 per loan (intercept, slope), loan-major
    beta1  (beta_01, beta_11)
    beta2  one per survival covariate
    nu0    overall baseline level
    v      RW2 temporal effect, length T
    u      ICAR spatial effect, length A            (M2, M3)
    delta  interaction, length T*A, area fastest     (M3)

The predictors are linear maps of the latent field::

    eta_Y = beta_01 + beta_11 s + U0_i + U1_i s
    eta_X = nu0 + z_i' beta2 + v_s [+ u_a] [+ delta_as] + lambda (U0_i + U1_i s)

``lambda`` is a hyperparameter, so the survival design depends on theta.
Everything after the U block is called the *global* block below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from . import gmrf
from .data import PanelDataset
from .errors import InvalidHyperparameterError, ModelSpecError
from .gmrf import AdjacencyGraph, ConstraintSet

LOG_2PI = math.log(2 * math.pi)

ALL_HYPER = ("tau_Y", "tau_U0", "tau_U1", "rho_01", "lambda", "tau_v", "tau_u", "tau_delta")
LONGITUDINAL_HYPER = ALL_HYPER[:4]


def hyper_names(variant: str, survival: bool = True) -> tuple:
    if not survival:
        return LONGITUDINAL_HYPER
    n = {"M1": 6, "M2": 7, "M3": 8}[variant]
    return ALL_HYPER[:n]


@dataclass(frozen=True)
class HyperParams:
    tau_Y: float
    tau_U0: float
    tau_U1: float
    rho_01: float
    lam: float = 0.0
    tau_v: float | None = None
    tau_u: float | None = None
    tau_delta: float | None = None

    def __post_init__(self):
        for name in ("tau_Y", "tau_U0", "tau_U1", "tau_v", "tau_u", "tau_delta"):
            val = getattr(self, name)
            if val is not None and not (val > 0 and np.isfinite(val)):
                raise InvalidHyperparameterError(f"{name} must be a positive precision, got {val}")
        if not -1 < self.rho_01 < 1:
            raise InvalidHyperparameterError(f"rho_01 must lie in (-1, 1), got {self.rho_01}")

    def get(self, name: str) -> float:
        return self.lam if name == "lambda" else getattr(self, name)

    def cov_U(self) -> np.ndarray:
        c = self.rho_01 / math.sqrt(self.tau_U0 * self.tau_U1)
        return np.array([[1 / self.tau_U0, c], [c, 1 / self.tau_U1]])

    def Q_U(self) -> np.ndarray:
        """Precision of (U0, U1); closed-form inverse of :meth:`cov_U`."""
        r = self.rho_01
        off = -r * math.sqrt(self.tau_U0 * self.tau_U1)
        return np.array([[self.tau_U0, off], [off, self.tau_U1]]) / (1 - r * r)

    def logdet_Q_U(self) -> float:
        return math.log(self.tau_U0) + math.log(self.tau_U1) - math.log1p(-self.rho_01**2)

    def to_internal(self, names: Sequence[str]) -> np.ndarray:
        out = []
        for n in names:
            val = self.get(n)
            if val is None:
                raise ModelSpecError(f"hyperparameter {n} not set")
            if n == "rho_01":
                out.append(math.atanh(val))
            elif n == "lambda":
                out.append(val)
            else:
                out.append(math.log(val))
        return np.array(out, dtype=float)

    @classmethod
    def from_internal(cls, x, names: Sequence[str]) -> "HyperParams":
        kw = {}
        for n, val in zip(names, np.asarray(x, dtype=float)):
            if n == "rho_01":
                kw[n] = math.tanh(val)
            elif n == "lambda":
                kw["lam"] = float(val)
            else:
                kw[n] = math.exp(val)
        return cls(**kw)

    def as_dict(self) -> dict:
        return {n: self.get(n) for n in ALL_HYPER if self.get(n) is not None}


@dataclass(frozen=True)
class HyperPriorSettings:
    """Vague default hyper-priors, each overridable by name.

    Precisions: Gamma(shape, rate); lambda: Normal(mean, sd); rho_01: Normal(0, sd)
    on the Fisher-z scale.
    """

    precision_shape: float = 1.0
    precision_rate: float = 5e-5
    lambda_mean: float = 0.0
    lambda_sd: float = 10.0
    rho_z_sd: float = 1.0
    overrides: dict = field(default_factory=dict)

    def gamma(self, name: str) -> tuple[float, float]:
        return self.overrides.get(name, (self.precision_shape, self.precision_rate))


def log_hyper_prior(theta: HyperParams, settings: HyperPriorSettings | None = None, names=None, scale: str = "internal") -> float:
    """Sum of log prior densities.

    With ``scale="internal"`` the density is that of (log tau, atanh rho, lambda),
    i.e. precision densities carry the Jacobian ``tau``.
    """
    settings = settings or HyperPriorSettings()
    names = names or [n for n in ALL_HYPER if theta.get(n) is not None]
    total = 0.0
    for n in names:
        val = theta.get(n)
        if n == "lambda":
            sd = settings.lambda_sd
            total += -0.5 * LOG_2PI - math.log(sd) - 0.5 * ((val - settings.lambda_mean) / sd) ** 2
        elif n == "rho_01":
            z = math.atanh(val)
            sd = settings.rho_z_sd
            total += -0.5 * LOG_2PI - math.log(sd) - 0.5 * (z / sd) ** 2
            if scale != "internal":
                total += -math.log1p(-val * val)
        else:
            a, b = settings.gamma(n)
            total += a * math.log(b) - gammaln(a) + (a - 1) * math.log(val) - b * val
            if scale == "internal":
                total += math.log(val)
    return total


@dataclass(frozen=True)
class LatentLayout:
    blocks: tuple  # ((name, offset, length), ...)

    @classmethod
    def build(cls, N: int, p: int, T: int, A: int = 0, variant: str = "M1", survival: bool = True) -> "LatentLayout":
        sizes = [("U", 2 * N), ("beta1", 2)]
        if survival:
            sizes += [("beta2", p), ("nu0", 1), ("v", T)]
            if variant in ("M2", "M3"):
                sizes.append(("u", A))
            if variant == "M3":
                sizes.append(("delta", T * A))
        blocks, off = [], 0
        for name, n in sizes:
            blocks.append((name, off, n))
            off += n
        return cls(tuple(blocks))

    @property
    def dim(self) -> int:
        name, off, n = self.blocks[-1]
        return off + n

    def __contains__(self, name: str) -> bool:
        return any(b[0] == name for b in self.blocks)

    def offset(self, name: str) -> int:
        for b, off, _ in self.blocks:
            if b == name:
                return off
        raise KeyError(name)

    def size(self, name: str) -> int:
        for b, _, n in self.blocks:
            if b == name:
                return n
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        off = self.offset(name)
        return slice(off, off + self.size(name))

    @property
    def n_U(self) -> int:
        return self.size("U")

    @property
    def n_global(self) -> int:
        return self.dim - self.n_U


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "M1"
    tau_f: float = 0.001
    covariates: tuple | None = None
    priors: HyperPriorSettings = field(default_factory=HyperPriorSettings)
    survival: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        priors = d.pop("priors", None) or {}
        overrides = {k: tuple(v) for k, v in priors.pop("overrides", {}).items()}
        cov = d.pop("covariates", None)
        return cls(
            variant=str(d.pop("variant", "M1")).upper(),
            tau_f=float(d.pop("tau_f", 0.001)),
            covariates=tuple(cov) if cov is not None else None,
            priors=HyperPriorSettings(**priors, overrides=overrides),
            survival=bool(d.pop("survival", True)),
        )


@dataclass(frozen=True)
class _Structure:
    name: str
    tau_name: str
    R: np.ndarray  # dense
    rank: int
    logdet: float


@dataclass(frozen=True)
class ModelDefinition:
    variant: str
    layout: LatentLayout
    dataset: PanelDataset
    constraints: ConstraintSet
    tau_f: float
    priors: HyperPriorSettings
    graph: AdjacencyGraph | None
    hyper_names: tuple
    survival: bool
    structures: tuple
    design: "Design"

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def N(self) -> int:
        return self.dataset.N

    @property
    def T(self) -> int:
        return self.dataset.T

    @property
    def n_fixed(self) -> int:
        n = 2
        if self.survival:
            n += self.layout.size("beta2") + 1
        return n

    @property
    def global_constraints(self) -> np.ndarray:
        """Constraint rows restricted to the global block (all U columns are zero)."""
        return self.constraints.rows[:, self.layout.n_U :]

    def theta_from_internal(self, x) -> HyperParams:
        return HyperParams.from_internal(x, self.hyper_names)

    def latent_names(self) -> list[str]:
        """Human-readable names for the global block."""
        names = ["beta_01", "beta_11"]
        if self.survival:
            names += [f"beta2[{c}]" for c in self.dataset.covariate_names]
            names.append("nu0")
            names += [f"v[{s}]" for s in range(1, self.T + 1)]
            if "u" in self.layout:
                names += [f"u[{a}]" for a in range(1, self.layout.size("u") + 1)]
            if "delta" in self.layout:
                A = self.layout.size("u")
                names += [f"delta[{a},{s}]" for s in range(1, self.T + 1) for a in range(1, A + 1)]
        return names


@dataclass(frozen=True)
class Design:
    """Row-level design maps into the global block (indices are global-relative).

    Y rows touch (beta_01, beta_11) with values (1, s); X rows touch
    nu0, beta2, v_s and, when present, u_a and delta_as. Both touch the loan's
    U block through d = (1, s) (scaled by lambda for X rows).
    """

    loan: np.ndarray
    s: np.ndarray
    y: np.ndarray
    x: np.ndarray
    y_cols: np.ndarray
    y_vals: np.ndarray
    x_cols: np.ndarray | None
    x_vals: np.ndarray | None
    YG: sparse.csr_matrix  # n_rows x G
    XG: sparse.csr_matrix | None  # n_rows x G
    DU: sparse.csr_matrix  # 2N x n_rows, d = (1, s) on the loan's U pair
    BY: np.ndarray  # DU @ YG, dense (2N x G)
    YtY: np.ndarray  # YG' YG, dense (G x G)
    bx_idx: np.ndarray | None  # flat (2N x G) positions hit by X rows
    bx_w: np.ndarray | None
    cx_idx: np.ndarray | None  # flat (G x G) positions hit by X rows
    cx_w: np.ndarray | None


def _build_design(layout: LatentLayout, ds: PanelDataset, survival: bool) -> Design:
    nU = layout.n_U
    s = ds.row_s.astype(float)
    loan = ds.row_loan
    b1 = layout.offset("beta1") - nU
    y_cols = np.column_stack([np.full(len(s), b1), np.full(len(s), b1 + 1)])
    y_vals = np.column_stack([np.ones_like(s), s])
    x_cols = x_vals = None
    if survival:
        cols = [np.full(len(s), layout.offset("nu0") - nU)]
        vals = [np.ones_like(s)]
        b2 = layout.offset("beta2") - nU
        for j in range(layout.size("beta2")):
            cols.append(np.full(len(s), b2 + j))
            vals.append(ds.Z[loan, j])
        cols.append(layout.offset("v") - nU + ds.row_s - 1)
        vals.append(np.ones_like(s))
        if "u" in layout:
            A = layout.size("u")
            area0 = ds.area[loan] - 1
            cols.append(layout.offset("u") - nU + area0)
            vals.append(np.ones_like(s))
            if "delta" in layout:
                cols.append(layout.offset("delta") - nU + (ds.row_s - 1) * A + area0)
                vals.append(np.ones_like(s))
        x_cols = np.column_stack(cols).astype(int)
        x_vals = np.column_stack(vals)
    n, G = len(s), layout.n_global
    rows = np.arange(n)

    def _csr(cols, vals):
        k = cols.shape[1]
        return sparse.csr_matrix((vals.ravel(), (np.repeat(rows, k), cols.ravel())), shape=(n, G))

    YG = _csr(y_cols.astype(int), y_vals)
    XG = _csr(x_cols, x_vals) if survival else None
    DU = sparse.csr_matrix(
        (np.r_[np.ones(n), s], (np.r_[2 * loan, 2 * loan + 1], np.r_[rows, rows])), shape=(nU, n)
    )
    BY = (DU @ YG).toarray()
    YtY = (YG.T @ YG).toarray()
    bx_idx = bx_w = cx_idx = cx_w = None
    if survival:
        # row r contributes c_r * d_k * x_j at (2 loan + k, col_j) of the border
        # and c_r * x_j * x_l at (col_j, col_l) of the global block
        d2 = np.column_stack([np.ones_like(s), s])
        bx_idx = ((2 * loan[:, None, None] + np.arange(2)[None, :, None]) * G + x_cols[:, None, :]).ravel()
        bx_w = (d2[:, :, None] * x_vals[:, None, :]).reshape(n, -1)
        cx_idx = (x_cols[:, :, None] * G + x_cols[:, None, :]).ravel()
        cx_w = (x_vals[:, :, None] * x_vals[:, None, :]).reshape(n, -1)
    return Design(
        loan, s, ds.row_y, ds.row_x.astype(float), y_cols.astype(int), y_vals, x_cols, x_vals,
        YG, XG, DU, BY, YtY, bx_idx, bx_w, cx_idx, cx_w,
    )


def build_model(dataset: PanelDataset, graph: AdjacencyGraph | None = None, variant: str = "M1", config: ModelConfig | None = None) -> ModelDefinition:
    """Assemble layout, constraints, structure matrices and design maps."""
    config = config or ModelConfig(variant=variant)
    variant = (variant or config.variant).upper()
    if variant not in gmrf.VARIANTS:
        raise ModelSpecError(f"unknown variant {variant!r}")
    if dataset.N == 0:
        raise ModelSpecError("dataset is empty")
    if config.covariates is not None:
        dataset = dataset.select_covariates(config.covariates)
    T = dataset.T
    survival = config.survival
    if survival and T < 3:
        raise ModelSpecError("T must be >= 3")
    A = 0
    if survival and variant in ("M2", "M3"):
        if graph is None:
            raise ModelSpecError(f"variant {variant} needs an adjacency graph")
        A = graph.n_areas
        if np.any(dataset.area < 1) or np.any(dataset.area > A):
            bad = sorted(set(dataset.area[(dataset.area < 1) | (dataset.area > A)].tolist()))
            raise ModelSpecError(f"area ids {bad[:10]} not covered by the graph (A={A})")
    p = dataset.Z.shape[1]
    layout = LatentLayout.build(dataset.N, p, T, A, variant, survival)

    structures = []
    if survival:
        Rv = gmrf.build_rw2_structure(T)
        ld, rk = gmrf.generalized_logdet(Rv)
        structures.append(_Structure("v", "tau_v", Rv.toarray(), rk, ld))
        if variant in ("M2", "M3"):
            Ru = gmrf.build_icar_structure(graph)
            ldu, rku = gmrf.generalized_logdet(Ru)
            structures.append(_Structure("u", "tau_u", Ru.toarray(), rku, ldu))
            if variant == "M3":
                Rd = gmrf.build_interaction_structure(Rv, Ru)
                structures.append(_Structure("delta", "tau_delta", Rd.toarray(), rk * rku, rku * ld + rk * ldu))
        local = gmrf.build_constraints(T, A, variant)
        constraints = local.embed(layout.offset("v"), layout.dim)
    else:
        constraints = ConstraintSet.empty(layout.dim)

    return ModelDefinition(
        variant=variant,
        layout=layout,
        dataset=dataset,
        constraints=constraints,
        tau_f=config.tau_f,
        priors=config.priors,
        graph=graph,
        hyper_names=hyper_names(variant, survival),
        survival=survival,
        structures=tuple(structures),
        design=_build_design(layout, dataset, survival),
    )


def check_theta(model: ModelDefinition, theta: HyperParams) -> None:
    for n in model.hyper_names:
        if theta.get(n) is None:
            raise InvalidHyperparameterError(f"{n} is required for variant {model.variant}")
    ev = np.linalg.eigvalsh(theta.cov_U())
    if ev.min() <= 0:
        raise InvalidHyperparameterError("covariance of (U0, U1) is not positive definite")


def global_prior_precision(model: ModelDefinition, theta: HyperParams) -> np.ndarray:
    """Dense prior precision of the global block."""
    lay = model.layout
    nU = lay.n_U
    G = lay.n_global
    C = np.zeros((G, G))
    idx = np.arange(model.n_fixed)
    C[idx, idx] = model.tau_f
    for st in model.structures:
        sl = lay.slice(st.name)
        sl = slice(sl.start - nU, sl.stop - nU)
        C[sl, sl] = theta.get(st.tau_name) * st.R
    return C


def assemble_precision(model: ModelDefinition, theta: HyperParams) -> sparse.csr_matrix:
    """Block-diagonal prior precision Q(theta) over the full latent field."""
    check_theta(model, theta)
    blocks = [sparse.kron(sparse.identity(model.N), sparse.csr_matrix(theta.Q_U()))]
    blocks.append(sparse.identity(model.n_fixed) * model.tau_f)
    for st in model.structures:
        blocks.append(sparse.csr_matrix(st.R) * theta.get(st.tau_name))
    return sparse.block_diag(blocks, format="csr")


def log_prior_normaliser(model: ModelDefinition, theta: HyperParams) -> float:
    """theta-dependent log normalising constant of p(mu | theta).

    Intrinsic blocks use the generalised determinant: the constraints sit in
    their null spaces, the remaining null directions are flat.
    """
    out = model.N * (0.5 * theta.logdet_Q_U() - LOG_2PI)
    out += model.n_fixed * 0.5 * (math.log(model.tau_f) - LOG_2PI)
    for st in model.structures:
        out += 0.5 * (st.rank * math.log(theta.get(st.tau_name)) + st.logdet - st.rank * LOG_2PI)
    return out


def design_rows(model: ModelDefinition, i: int, s: int, lam: float):
    """Sparse design rows for loan ``i`` (0-based) at month ``s`` (1-based).

    Returns:
        (row_Y, row_X) as 1 x dim CSR matrices; ``row_X`` is None for
        longitudinal-only models.
    """
    ds = model.dataset
    if not (0 <= i < ds.N) or not (1 <= s <= ds.duration[i]):
        raise IndexError(f"(loan {i}, month {s}) is not in the panel")
    lay = model.layout
    dim = lay.dim
    r = ds.row_offsets[i] + s - 1
    d = model.design
    nU = lay.n_U
    cu = [2 * i, 2 * i + 1]
    row_Y = sparse.csr_matrix(
        (np.r_[1.0, float(s), d.y_vals[r]], ([0] * 4, cu + list(d.y_cols[r] + nU))), shape=(1, dim)
    )
    row_X = None
    if model.survival:
        row_X = sparse.csr_matrix(
            (np.r_[lam, lam * s, d.x_vals[r]], ([0] * (2 + d.x_cols.shape[1]), cu + list(d.x_cols[r] + nU))),
            shape=(1, dim),
        )
    return row_Y, row_X


def predictors(model: ModelDefinition, mu: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray | None]:
    """Row-wise (eta_Y, eta_X) for a latent vector (or stack of vectors)."""
    mu = np.asarray(mu)
    d = model.design
    nU = model.layout.n_U
    U = mu[..., :nU].reshape(mu.shape[:-1] + (-1, 2))
    g = mu[..., nU:]
    Ui = U[..., d.loan, :]
    dU = Ui[..., 0] + Ui[..., 1] * d.s
    eta_Y = (g[..., d.y_cols] * d.y_vals).sum(-1) + dU
    eta_X = None
    if model.survival:
        eta_X = (g[..., d.x_cols] * d.x_vals).sum(-1) + lam * dU
    return eta_Y, eta_X
