"""Structure matrices, identifiability constraints and constrained sampling.

The temporal effect uses a second-order random walk (RW2), the spatial effect
an intrinsic CAR (ICAR) on an adjacency graph, and the space-time interaction
the Kronecker product of the two. All structure matrices are returned as
``scipy.sparse.csr_matrix`` with exact integer-valued entries.

Index convention for the interaction vector: area varies fastest, so the
0-based position of (area a, time s) is ``s * A + a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateConditionalError,
    GraphError,
    InvalidDimensionError,
    NotPositiveDefiniteError,
)

VARIANTS = ("M1", "M2", "M3")


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected neighbour relation between areas ``1..n_areas``."""

    n_areas: int
    neighbour_pairs: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_areas < 1:
            raise GraphError("n_areas must be positive")
        clean = set()
        for pair in self.neighbour_pairs:
            a, b = (int(p) for p in pair)
            if a == b:
                raise GraphError(f"self-pair ({a}, {b})")
            if not (1 <= a <= self.n_areas and 1 <= b <= self.n_areas):
                raise GraphError(f"pair ({a}, {b}) outside 1..{self.n_areas}")
            clean.add((min(a, b), max(a, b)))
        object.__setattr__(self, "neighbour_pairs", frozenset(clean))

    @classmethod
    def from_pairs(cls, n_areas: int, pairs: Iterable[tuple[int, int]]) -> "AdjacencyGraph":
        pairs = list(pairs)
        seen = set()
        for a, b in pairs:
            key = (min(a, b), max(a, b))
            if key in seen:
                raise GraphError(f"duplicate pair {key}")
            seen.add(key)
        return cls(n_areas, frozenset(pairs))

    @classmethod
    def lattice(cls, rows: int, cols: int) -> "AdjacencyGraph":
        """Rook-adjacency lattice, areas numbered row-major from 1."""
        pairs = []
        for r in range(rows):
            for c in range(cols):
                a = r * cols + c + 1
                if c + 1 < cols:
                    pairs.append((a, a + 1))
                if r + 1 < rows:
                    pairs.append((a, a + cols))
        return cls(rows * cols, frozenset(pairs))

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.neighbour_pairs)

    def degrees(self) -> np.ndarray:
        """Neighbour counts m_a, indexed 0..A-1."""
        m = np.zeros(self.n_areas, dtype=int)
        for a, b in self.neighbour_pairs:
            m[a - 1] += 1
            m[b - 1] += 1
        return m

    def neighbours(self, a: int) -> list[int]:
        out = [b if a == x else x for x, b in self.neighbour_pairs if a in (x, b)]
        return sorted(out)

    def adjacency_matrix(self) -> sparse.csr_matrix:
        pairs = np.array(self.sorted_pairs(), dtype=int).reshape(-1, 2) - 1
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        data = np.ones(len(rows))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_areas, self.n_areas))

    def n_components(self) -> int:
        return int(connected_components(self.adjacency_matrix(), directed=False)[0])

    def component_labels(self) -> np.ndarray:
        return connected_components(self.adjacency_matrix(), directed=False)[1]


def read_adjacency(path: str | Path) -> AdjacencyGraph:
    """Parse an adjacency file: header ``AREAS <A>`` then ``a<TAB>a'`` lines."""
    n_areas = None
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if n_areas is None:
                head = line.split()
                if len(head) != 2 or head[0].upper() != "AREAS":
                    raise GraphError(f"{path}:{lineno}: expected header 'AREAS <A>'")
                n_areas = int(head[1])
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected two area ids")
            pairs.append((int(parts[0]), int(parts[1])))
    if n_areas is None:
        raise GraphError(f"{path}: missing 'AREAS' header")
    return AdjacencyGraph.from_pairs(n_areas, pairs)


def write_adjacency(graph: AdjacencyGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"AREAS {graph.n_areas}\n")
        for a, b in graph.sorted_pairs():
            fh.write(f"{a}\t{b}\n")


# --------------------------------------------------------------------------
# structure matrices


def build_rw2_structure(T: int) -> sparse.csr_matrix:
    """RW2 structure matrix ``D^T D`` with ``D`` the second-difference operator."""
    if T < 3:
        raise InvalidDimensionError(f"RW2 needs T >= 3, got {T}")
    D = sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(T - 2, T), format="csr")
    return (D.T @ D).tocsr()


def build_icar_structure(graph: AdjacencyGraph) -> sparse.csr_matrix:
    W = graph.adjacency_matrix()
    m = np.asarray(W.sum(axis=1)).ravel()
    return (sparse.diags(m) - W).tocsr()


def build_interaction_structure(Rv, Ru) -> sparse.csr_matrix:
    """Kronecker product ``Rv ⊗ Ru`` (area index varies fastest)."""
    if Rv.shape[0] != Rv.shape[1] or Ru.shape[0] != Ru.shape[1]:
        raise InvalidDimensionError("structure matrices must be square")
    return sparse.kron(sparse.csr_matrix(Rv), sparse.csr_matrix(Ru), format="csr")


def numerical_rank(M, rel_tol: float = 1e-9) -> int:
    """Rank from the symmetric eigenvalues, treating |ev| < rel_tol*max as zero."""
    M = M.toarray() if sparse.issparse(M) else np.asarray(M)
    ev = np.abs(linalg.eigvalsh(M))
    if ev.max() == 0:
        return 0
    return int(np.sum(ev > rel_tol * ev.max()))


def generalized_logdet(M, rel_tol: float = 1e-9) -> tuple[float, int]:
    """Sum of log non-zero eigenvalues and the rank of a PSD matrix."""
    M = M.toarray() if sparse.issparse(M) else np.asarray(M)
    ev = linalg.eigvalsh(M)
    keep = ev > rel_tol * max(ev.max(), 0.0)
    return float(np.sum(np.log(ev[keep]))), int(keep.sum())


# --------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class ConstraintSet:
    """Linear equality constraints ``rows @ x = rhs``."""

    rows: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        rhs = np.asarray(self.rhs, dtype=float).ravel()
        if rows.shape[0] != rhs.shape[0]:
            raise InvalidDimensionError("rows and rhs disagree in length")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "rhs", rhs)

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "ConstraintSet":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def embed(self, offset: int, dim: int) -> "ConstraintSet":
        """Place the columns at ``offset`` inside a vector of length ``dim``."""
        rows = np.zeros((self.k, dim))
        rows[:, offset : offset + self.dim] = self.rows
        return ConstraintSet(rows, self.rhs.copy())

    def stack(self, other: "ConstraintSet") -> "ConstraintSet":
        return ConstraintSet(np.vstack([self.rows, other.rows]), np.concatenate([self.rhs, other.rhs]))

    def residual(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.rows.T - self.rhs


def build_constraints(T: int, A: int = 0, variant: str = "M1") -> ConstraintSet:
    """Sum-to-zero constraints over the concatenated (v, u, delta) vector.

    M1 constrains ``sum(v)``; M2 adds ``sum(u)``; M3 adds, for the interaction,
    every area's time-sum and every time's area-sum except the last one
    (the full set has one redundant row).
    """
    variant = variant.upper()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if T < 3:
        raise InvalidDimensionError("T must be >= 3")
    if variant != "M1" and A < 1:
        raise InvalidDimensionError("spatial variants need A >= 1")
    n_u = A if variant in ("M2", "M3") else 0
    n_d = T * A if variant == "M3" else 0
    dim = T + n_u + n_d
    rows = []
    r = np.zeros(dim)
    r[:T] = 1.0
    rows.append(r)
    if n_u:
        r = np.zeros(dim)
        r[T : T + A] = 1.0
        rows.append(r)
    if n_d:
        off = T + A
        for a in range(A):
            r = np.zeros(dim)
            r[off + a + A * np.arange(T)] = 1.0
            rows.append(r)
        for s in range(T - 1):
            r = np.zeros(dim)
            r[off + s * A : off + (s + 1) * A] = 1.0
            rows.append(r)
    rows = np.array(rows)
    return ConstraintSet(rows, np.zeros(rows.shape[0]))


def null_space_constraints(R, rel_tol: float = 1e-9) -> ConstraintSet:
    """Constraint rows spanning the null space of a PSD structure matrix."""
    M = R.toarray() if sparse.issparse(R) else np.asarray(R)
    ev, vec = linalg.eigh(M)
    null = vec[:, ev <= rel_tol * ev.max()]
    return ConstraintSet(null.T.copy(), np.zeros(null.shape[1]))


# --------------------------------------------------------------------------
# sampling


def cholesky_lower(Q: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefiniteError with the pivot."""
    L, info = linalg.lapack.dpotrf(np.asarray(Q, dtype=float), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return L


def jitter(Q, tau: float = 1.0, eps: float = 1e-6):
    """Add ``eps * tau`` to the diagonal of an intrinsic precision."""
    n = Q.shape[0]
    if sparse.issparse(Q):
        return (Q + eps * tau * sparse.identity(n, format="csr")).tocsr()
    return np.asarray(Q) + eps * tau * np.eye(n)


def sample_constrained_gaussian(
    Q,
    mean,
    constraints: ConstraintSet | None,
    n: int,
    seed=None,
) -> np.ndarray:
    """Draw ``n`` samples of N(mean, Q^-1) conditioned on ``A x = e``.

    Unconstrained draws are corrected by conditioning by kriging,
    ``x - Q^-1 A^T (A Q^-1 A^T)^-1 (A x - e)``.

    Returns:
        Array of shape (n, dim).
    """
    Qd = Q.toarray() if sparse.issparse(Q) else np.asarray(Q, dtype=float)
    dim = Qd.shape[0]
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,))
    rng = np.random.default_rng(seed)
    L = cholesky_lower(Qd)
    z = rng.standard_normal((dim, n))
    x = mean[:, None] + linalg.solve_triangular(L, z, lower=True, trans="T")
    if constraints is not None and constraints.k:
        A = constraints.rows
        V = linalg.cho_solve((L, True), A.T)
        W = A @ V
        x = x - V @ linalg.solve(W, A @ x - constraints.rhs[:, None], assume_a="pos")
    return x.T


def constrained_covariance(Q, constraints: ConstraintSet | None) -> np.ndarray:
    """Dense covariance of N(., Q^-1) conditioned on the constraints."""
    Qd = Q.toarray() if sparse.issparse(Q) else np.asarray(Q, dtype=float)
    S = linalg.inv(Qd)
    if constraints is None or not constraints.k:
        return S
    A = constraints.rows
    V = S @ A.T
    return S - V @ linalg.solve(A @ V, V.T)


def icar_full_conditional(u, a: int, graph: AdjacencyGraph, tau_u: float) -> tuple[float, float]:
    """Mean and variance of ``u_a`` given the rest under an ICAR(tau_u) prior.

    Args:
        u: spatial effects, 0-indexed array of length A.
        a: 1-based area id.
    """
    nb = graph.neighbours(a)
    if not nb:
        raise DegenerateConditionalError(f"area {a} has no neighbours")
    u = np.asarray(u, dtype=float)
    m_a = len(nb)
    return float(u[np.array(nb) - 1].sum() / m_a), 1.0 / (tau_u * m_a)
