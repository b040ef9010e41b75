"""Loan-level ingestion and the person-period panel.

Origination file columns::

    loan_id, area, orig_date, term, int_rt, orig_upb, cltv, cnt_units, dti,
    loan_purpose, cnt_borr[, extra numeric covariates ...]

Performance file columns::

    loan_id, month_index, current_upb, prepaid_flag[, y]

``int_rt`` is the annual rate in percent; the monthly rate is ``int_rt/1200``.
When the optional ``y`` column is present it is taken as the longitudinal
outcome verbatim (synthetic data); otherwise ``y`` is derived from the balance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

ORIGINATION_COLUMNS = [
    "loan_id",
    "area",
    "orig_date",
    "term",
    "int_rt",
    "orig_upb",
    "cltv",
    "cnt_units",
    "dti",
    "loan_purpose",
    "cnt_borr",
]
PERFORMANCE_COLUMNS = ["loan_id", "month_index", "current_upb", "prepaid_flag"]

# encoded covariates used for the mortgage application, reference levels:
# more-than-one unit, term <= 15y, cash-out refinance, single borrower
MORTGAGE_COVARIATES = (
    "cltv",
    "orig_upb",
    "cnt_units1",
    "dti",
    "int_rt",
    "term_g15",
    "loan_purposeN",
    "loan_purposeP",
    "cnt_borr2",
)
MORTGAGE_NUMERIC = ("cltv", "orig_upb", "dti", "int_rt")

DEFAULT_T_STUDY = 54


@dataclass
class LoanRecord:
    loan_id: str
    area: int
    orig_date: str
    term: int
    int_rt: float
    orig_upb: float
    cltv: float = np.nan
    cnt_units: int = 1
    dti: float = np.nan
    loan_purpose: str = "C"
    cnt_borr: int = 1
    extra: dict = field(default_factory=dict)
    months: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    balances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: np.ndarray | None = None
    event: int = 0

    @property
    def duration(self) -> int:
        return int(self.months[-1]) if len(self.months) else 0

    @property
    def monthly_rate(self) -> float:
        return self.int_rt / 1200.0

    def covariate(self, name: str) -> float:
        """Encoded covariate value by name."""
        if name in self.extra:
            return float(self.extra[name])
        if name == "cnt_units1":
            return float(self.cnt_units == 1)
        if name == "term_g15":
            return float(self.term > 180)
        if name == "loan_purposeN":
            return float(str(self.loan_purpose).upper() == "N")
        if name == "loan_purposeP":
            return float(str(self.loan_purpose).upper() == "P")
        if name == "cnt_borr2":
            return float(self.cnt_borr > 1)
        if name == "orig_upb":
            return self.orig_upb / 1000.0
        if name in ("cltv", "dti", "int_rt"):
            return float(getattr(self, name))
        raise KeyError(f"unknown covariate {name!r}")

    def outcome(self, T_study: int) -> np.ndarray:
        if self.y is not None:
            return np.asarray(self.y, dtype=float)
        return longitudinal_outcome(self.orig_upb, self.balances, self.monthly_rate, self.term, T_study)


def longitudinal_outcome(P0, Pt, i_monthly, M, T_study):
    """Scaled repaid fraction ``(P0 - Pt)/P0 * ((1+i)^M - 1) / (i T)``.

    For a loan on its amortisation schedule this equals ``((1+i)^t - 1)/(i T)``.
    """
    P0 = np.asarray(P0, dtype=float)
    Pt = np.asarray(Pt, dtype=float)
    i = np.asarray(i_monthly, dtype=float)
    if np.any(i <= 0):
        raise DataError("monthly interest rate must be positive")
    if np.any(P0 <= 0):
        raise DataError("original balance must be positive")
    if np.any(Pt < 0) or np.any(Pt > P0 * (1 + 1e-12)):
        raise DataError("current balance must lie in [0, P0]")
    growth = np.expm1(M * np.log1p(i))
    return (P0 - Pt) / P0 * growth / (i * T_study)


def balance_from_outcome(y, P0, i_monthly, M, T_study):
    """Inverse of :func:`longitudinal_outcome` (no range check)."""
    growth = np.expm1(M * np.log1p(i_monthly))
    return P0 * (1.0 - np.asarray(y) * i_monthly * T_study / growth)


@dataclass(frozen=True)
class PanelDataset:
    """Person-period table plus loan-level attributes.

    Rows are sorted by loan, then month ``s = 1..t_i``. Loan index is 0-based
    into the loan arrays; ``area`` is 1-based.
    """

    loan_ids: np.ndarray
    duration: np.ndarray
    event: np.ndarray
    area: np.ndarray
    Z: np.ndarray
    covariate_names: tuple
    T: int
    row_loan: np.ndarray
    row_s: np.ndarray
    row_y: np.ndarray
    row_x: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.duration)

    @property
    def n_rows(self) -> int:
        return len(self.row_s)

    @property
    def row_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.duration)])

    def at_risk(self, t: int) -> np.ndarray:
        """Indices of loans with observed duration strictly greater than t."""
        return np.flatnonzero(self.duration > t)

    def n_at_risk(self, t: int) -> int:
        return int(np.sum(self.duration > t))

    def loan_rows(self, i: int) -> slice:
        off = self.row_offsets
        return slice(int(off[i]), int(off[i + 1]))

    def select_covariates(self, names) -> "PanelDataset":
        names = tuple(names)
        idx = [self.covariate_names.index(n) for n in names]
        return replace(self, Z=self.Z[:, idx], covariate_names=names)

    @classmethod
    def from_arrays(cls, duration, event, y_rows, Z, covariate_names, T, area=None, loan_ids=None):
        """Build the panel from loan-level durations/events and row-level outcomes."""
        duration = np.asarray(duration, dtype=int)
        event = np.asarray(event, dtype=int)
        N = len(duration)
        if np.any(duration < 1):
            raise DataError("durations must be >= 1")
        if np.any(duration > T):
            raise DataError("duration exceeds the study period")
        row_loan = np.repeat(np.arange(N), duration)
        starts = np.repeat(np.cumsum(duration) - duration, duration)
        row_s = np.arange(len(row_loan)) - starts + 1
        row_x = np.zeros(len(row_loan), dtype=int)
        last = np.cumsum(duration) - 1
        row_x[last] = event
        y_rows = np.asarray(y_rows, dtype=float)
        if y_rows.shape != row_s.shape:
            raise DataError("outcome vector does not match the panel length")
        area = np.ones(N, dtype=int) if area is None else np.asarray(area, dtype=int)
        ids = np.array([str(i + 1) for i in range(N)]) if loan_ids is None else np.asarray(loan_ids).astype(str)
        return cls(
            loan_ids=ids,
            duration=duration,
            event=event,
            area=area,
            Z=np.asarray(Z, dtype=float).reshape(N, -1),
            covariate_names=tuple(covariate_names),
            T=int(T),
            row_loan=row_loan,
            row_s=row_s,
            row_y=y_rows,
            row_x=row_x,
        )

    def event_sequence(self, i: int) -> np.ndarray:
        return self.row_x[self.loan_rows(i)]


def expand_person_period(loans, T_study: int = DEFAULT_T_STUDY, covariates=MORTGAGE_COVARIATES) -> PanelDataset:
    """Expand loans into one row per (loan, month) with the event indicator."""
    ys, durations, events, areas, ids, Z = [], [], [], [], [], []
    for rec in loans:
        months = np.asarray(rec.months, dtype=int)
        if len(months) == 0:
            raise DataError(f"loan {rec.loan_id} has no observed months")
        if len(np.unique(months)) != len(months):
            raise DataError(f"duplicate (loan, month) rows for loan {rec.loan_id}")
        if not np.array_equal(np.sort(months), np.arange(1, len(months) + 1)):
            raise DataError(f"loan {rec.loan_id}: months must run 1..t_i without gaps")
        if rec.duration > T_study:
            raise DataError(f"loan {rec.loan_id}: duration {rec.duration} exceeds T_study={T_study}")
        if rec.event not in (0, 1):
            raise DataError(f"loan {rec.loan_id}: event indicator must be 0/1")
        order = np.argsort(months)
        ys.append(rec.outcome(T_study)[order])
        durations.append(rec.duration)
        events.append(rec.event)
        areas.append(rec.area)
        ids.append(rec.loan_id)
        Z.append([rec.covariate(c) for c in covariates])
    return PanelDataset.from_arrays(
        durations,
        events,
        np.concatenate(ys),
        np.array(Z, dtype=float).reshape(len(durations), len(covariates)),
        covariates,
        T_study,
        area=areas,
        loan_ids=ids,
    )


def standardize(dataset: PanelDataset, names=None) -> tuple[PanelDataset, dict]:
    """Centre and scale the named covariates to mean 0, sd 1.

    The sample sd uses ``ddof=1``. Returns the new dataset and ``{name: (mean, sd)}``.
    """
    names = list(names if names is not None else [n for n in MORTGAGE_NUMERIC if n in dataset.covariate_names])
    stats = {}
    for name in names:
        col = dataset.Z[:, dataset.covariate_names.index(name)]
        sd = col.std(ddof=1)
        if not np.isfinite(sd) or sd == 0:
            raise DataError(f"covariate {name!r} has zero variance")
        stats[name] = (float(col.mean()), float(sd))
    return apply_standardization(dataset, stats), stats


def apply_standardization(dataset: PanelDataset, stats: dict) -> PanelDataset:
    Z = dataset.Z.copy()
    for name, (mu, sd) in stats.items():
        j = dataset.covariate_names.index(name)
        Z[:, j] = (Z[:, j] - mu) / sd
    merged = {**dataset.stats, **stats}
    return replace(dataset, Z=Z, stats=merged)


def destandardize(dataset: PanelDataset, stats: dict | None = None) -> PanelDataset:
    stats = dataset.stats if stats is None else stats
    Z = dataset.Z.copy()
    for name, (mu, sd) in stats.items():
        j = dataset.covariate_names.index(name)
        Z[:, j] = Z[:, j] * sd + mu
    rest = {k: v for k, v in dataset.stats.items() if k not in stats}
    return replace(dataset, Z=Z, stats=rest)


# --------------------------------------------------------------------------
# CSV io


def load_loans(origination_path, performance_path) -> list[LoanRecord]:
    """Join the origination and monthly performance files into loan records."""
    orig = pd.read_csv(origination_path, dtype={"loan_id": str, "loan_purpose": str, "orig_date": str})
    perf = pd.read_csv(performance_path, dtype={"loan_id": str})
    missing = [c for c in ORIGINATION_COLUMNS if c not in orig.columns]
    if missing:
        raise DataError(f"origination file lacks columns {missing}")
    missing = [c for c in PERFORMANCE_COLUMNS if c not in perf.columns]
    if missing:
        raise DataError(f"performance file lacks columns {missing}")
    if orig["loan_id"].duplicated().any():
        raise DataError("duplicate loan ids in origination file")
    known = set(orig["loan_id"])
    orphans = sorted(set(perf["loan_id"]) - known)
    if orphans:
        raise DataError(f"performance rows for unknown loans: {orphans[:10]}")
    groups = {k: g for k, g in perf.groupby("loan_id", sort=False)}
    absent = [lid for lid in orig["loan_id"] if lid not in groups]
    if absent:
        raise DataError(f"loans without performance rows: {absent[:10]}")

    extras = [c for c in orig.columns if c not in ORIGINATION_COLUMNS]
    has_y = "y" in perf.columns
    loans = []
    for row in orig.itertuples(index=False):
        g = groups[row.loan_id].sort_values("month_index")
        months = g["month_index"].to_numpy(dtype=int)
        if len(np.unique(months)) != len(months):
            raise DataError(f"duplicate (loan, month) rows for loan {row.loan_id}")
        balances = g["current_upb"].to_numpy(dtype=float)
        if not has_y and np.any(np.diff(balances) > 0):
            warnings.warn(f"loan {row.loan_id}: non-monotone balance", stacklevel=2)
        loans.append(
            LoanRecord(
                loan_id=str(row.loan_id),
                area=int(row.area),
                orig_date=str(row.orig_date),
                term=int(row.term),
                int_rt=float(row.int_rt),
                orig_upb=float(row.orig_upb),
                cltv=float(row.cltv),
                cnt_units=int(row.cnt_units),
                dti=float(row.dti),
                loan_purpose=str(row.loan_purpose),
                cnt_borr=int(row.cnt_borr),
                extra={c: float(getattr(row, c)) for c in extras},
                months=months,
                balances=balances,
                y=g["y"].to_numpy(dtype=float) if has_y else None,
                event=int(g["prepaid_flag"].to_numpy()[-1]),
            )
        )
    return loans


def write_loans(loans, origination_path, performance_path) -> None:
    extras = sorted({k for rec in loans for k in rec.extra})
    orig_rows = []
    perf_frames = []
    with_y = any(rec.y is not None for rec in loans)
    for rec in loans:
        row = {c: getattr(rec, c) for c in ORIGINATION_COLUMNS}
        row.update({k: rec.extra.get(k, np.nan) for k in extras})
        orig_rows.append(row)
        n = len(rec.months)
        flag = np.zeros(n, dtype=int)
        if n:
            flag[-1] = rec.event
        frame = {
            "loan_id": [rec.loan_id] * n,
            "month_index": rec.months,
            "current_upb": rec.balances,
            "prepaid_flag": flag,
        }
        if with_y:
            frame["y"] = rec.y if rec.y is not None else np.full(n, np.nan)
        perf_frames.append(pd.DataFrame(frame))
    pd.DataFrame(orig_rows, columns=ORIGINATION_COLUMNS + extras).to_csv(origination_path, index=False)
    perf = pd.concat(perf_frames, ignore_index=True) if perf_frames else pd.DataFrame(columns=PERFORMANCE_COLUMNS)
    perf.to_csv(performance_path, index=False)


def load_panel(data_dir, covariates=None, T_study=None, standardize_names=None) -> PanelDataset:
    """Load ``origination.csv``/``performance.csv`` from a directory into a panel."""
    data_dir = Path(data_dir)
    loans = load_loans(data_dir / "origination.csv", data_dir / "performance.csv")
    if covariates is None:
        extras = sorted(loans[0].extra) if loans else []
        covariates = tuple(extras) if extras else MORTGAGE_COVARIATES
    if T_study is None:
        T_study = max(DEFAULT_T_STUDY, max(rec.duration for rec in loans))
    panel = expand_person_period(loans, T_study, covariates)
    if standardize_names:
        panel, _ = standardize(panel, standardize_names)
    return panel
