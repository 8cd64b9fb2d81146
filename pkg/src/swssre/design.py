"""Trial layouts: allocation matrices, fixed-effect design matrices and the
per-cluster covariance of the Hussey-Hughes model.

Periods are 1-based throughout the public API (period 1 is the reference
period with no fixed effect). Fixed effects are always ordered
``(mu, pi_2, ..., pi_T, tau)`` so that column ``T`` (0-based) is ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class AllocationMatrix:
    """Binary C x T treatment matrix of a stepped-wedge trial.

    Args:
        entries: array-like of 0/1 indicators, one row per cluster.
        rollout: enforce that each row is non-decreasing (no switching back
            to control). Pass ``False`` for crossover-style layouts.
    """

    entries: np.ndarray
    rollout: bool = True

    def __post_init__(self) -> None:
        arr = np.array(self.entries, dtype=float)
        if arr.ndim != 2:
            raise ValueError("allocation matrix must be two-dimensional")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("allocation entries must be 0 or 1")
        C, T = arr.shape
        if C < 2 or T < 1:
            raise ValueError(f"need at least 2 clusters and 1 period, got {C}x{T}")
        if self.rollout and np.any(np.diff(arr, axis=1) < 0):
            raise ValueError("roll-out violated: a cluster switches back to control")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def C(self) -> int:
        return self.entries.shape[0]

    @property
    def T(self) -> int:
        return self.entries.shape[1]

    @property
    def treated_cells(self) -> int:
        """sum(X): number of treated cluster-period cells."""
        return int(self.entries.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AllocationMatrix):
            return NotImplemented
        return self.rollout == other.rollout and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash((self.entries.shape, self.entries.tobytes(), self.rollout))

    def __repr__(self) -> str:
        rows = ",".join("".join(str(int(v)) for v in row) for row in self.entries)
        return f"AllocationMatrix({self.C}x{self.T}: {rows})"

    def tolist(self) -> list[list[int]]:
        return self.entries.astype(int).tolist()


@dataclass(frozen=True)
class VarianceComponents:
    """Between-cluster and residual variances of the model."""

    sigma_c_sq: float
    sigma_e_sq: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.sigma_c_sq) or self.sigma_c_sq < 0:
            raise ValueError(f"sigma_c_sq must be >= 0, got {self.sigma_c_sq}")
        if not np.isfinite(self.sigma_e_sq) or self.sigma_e_sq <= 0:
            raise ValueError(f"sigma_e_sq must be > 0, got {self.sigma_e_sq}")

    @property
    def icc(self) -> float:
        return self.sigma_c_sq / (self.sigma_c_sq + self.sigma_e_sq)

    @property
    def ratio(self) -> float:
        """sigma_c^2 / sigma_e^2."""
        return self.sigma_c_sq / self.sigma_e_sq

    def scaled(self, c_mult: float, e_mult: float) -> "VarianceComponents":
        return VarianceComponents(self.sigma_c_sq * c_mult, self.sigma_e_sq * e_mult)


@dataclass(frozen=True)
class DesignMatrix:
    """Fixed-effect design matrix with T + 1 columns in beta order."""

    matrix: np.ndarray
    periods: tuple[int, ...]
    n: int
    level: str
    row_cells: np.ndarray = field(repr=False)  # (cluster, period) per row, 0/1-based

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class ClusterCovariance:
    """Compound-symmetric covariance of one cluster's observed cells.

    Individual level it is ``sigma_e^2 I + sigma_c^2 J`` over all of the
    cluster's observations; for the vector of cell means it is
    ``diag(sigma_e^2 / m) + sigma_c^2 J``.
    """

    cell_counts: np.ndarray
    sigma_c_sq: float
    sigma_e_sq: float

    def __post_init__(self) -> None:
        m = np.asarray(self.cell_counts, dtype=float)
        if m.ndim != 1 or m.size == 0 or np.any(m < 1):
            raise ValueError("cell_counts must be a non-empty vector of counts >= 1")
        if self.sigma_e_sq <= 0 or self.sigma_c_sq < 0:
            raise ValueError("need sigma_e_sq > 0 and sigma_c_sq >= 0")
        object.__setattr__(self, "cell_counts", m)

    @property
    def dimension(self) -> int:
        return self.cell_counts.size

    @property
    def total(self) -> float:
        return float(self.cell_counts.sum())

    def dense(self, level: Literal["cell", "individual"] = "cell") -> np.ndarray:
        if level == "individual":
            M = int(self.total)
            return self.sigma_e_sq * np.eye(M) + self.sigma_c_sq * np.ones((M, M))
        diag = np.diag(self.sigma_e_sq / self.cell_counts)
        return diag + self.sigma_c_sq * np.ones((self.dimension, self.dimension))

    def inverse(self) -> np.ndarray:
        """Cell-level inverse via Sherman-Morrison on diag(a) + b 11'."""
        w = self.cell_counts / self.sigma_e_sq
        k = self.sigma_c_sq / (1.0 + self.sigma_c_sq * w.sum())
        return np.diag(w) - k * np.outer(w, w)

    def logdet(self) -> float:
        """Cell-level log-determinant."""
        a = self.sigma_e_sq / self.cell_counts
        return float(np.log(a).sum() + np.log1p(self.sigma_c_sq * (1.0 / a).sum()))


def build_standard_allocation(C: int, T: int, switches: Sequence[int]) -> AllocationMatrix:
    """Roll-out matrix where ``switches[j]`` clusters start treatment in period j + 1.

    Clusters are ordered by switch time; clusters left over never switch.

    >>> build_standard_allocation(2, 2, (0, 1)).tolist()
    [[0, 1], [0, 0]]
    """
    switches = [int(s) for s in switches]
    if len(switches) != T:
        raise ValueError(f"switches must have length T={T}, got {len(switches)}")
    if any(s < 0 for s in switches):
        raise ValueError("switch counts must be non-negative")
    if sum(switches) > C:
        raise ValueError(f"sum(switches)={sum(switches)} exceeds C={C}")
    X = np.zeros((C, T))
    row = 0
    for j, count in enumerate(switches):
        X[row : row + count, j:] = 1.0
        row += count
    return AllocationMatrix(X)


def tds1_allocation() -> AllocationMatrix:
    """4 x 5 balanced wedge, one cluster switching in each of periods 2-5."""
    return build_standard_allocation(4, 5, (0, 1, 1, 1, 1))


def tds2_allocation() -> AllocationMatrix:
    """20 x 9 wedge: three clusters switch in periods 2-5, two in 6-9."""
    return build_standard_allocation(20, 9, (0, 3, 3, 3, 3, 2, 2, 2, 2))


def restrict(X: AllocationMatrix, t: int) -> AllocationMatrix:
    """First ``t`` columns of ``X``."""
    if not 1 <= t <= X.T:
        raise ValueError(f"t must lie in [1, {X.T}], got {t}")
    return AllocationMatrix(X.entries[:, :t], rollout=X.rollout)


def _check_periods(periods: Iterable[int], T: int) -> tuple[int, ...]:
    ps = tuple(sorted(int(p) for p in periods))
    if not ps:
        raise ValueError("period set must be non-empty")
    if ps[0] < 1 or ps[-1] > T:
        raise ValueError(f"periods must lie in [1, {T}]")
    if ps != tuple(range(ps[0], ps[-1] + 1)):
        raise ValueError("period set must be contiguous")
    return ps


def cell_design(X: AllocationMatrix) -> np.ndarray:
    """Array of shape (C, T, T + 1): the design row of every cell."""
    C, T = X.C, X.T
    D = np.zeros((C, T, T + 1))
    D[:, :, 0] = 1.0
    for j in range(1, T):
        D[:, j, j] = 1.0
    D[:, :, T] = X.entries
    return D


def design_matrix(
    X: AllocationMatrix,
    periods: Iterable[int],
    n: int,
    level: Literal["individual", "cell"] = "individual",
) -> DesignMatrix:
    """Design matrix over ``periods`` with ``n`` individuals per cell.

    Rows are cluster-major, then period, then individual. Columns of
    periods outside ``periods`` are identically zero.
    """
    ps = _check_periods(periods, X.T)
    if n < 1:
        raise ValueError("n must be >= 1")
    if level not in ("individual", "cell"):
        raise ValueError(f"unknown level {level!r}")
    D = cell_design(X)
    cells = [(i, j) for i in range(X.C) for j in ps]
    reps = 1 if level == "cell" else n
    rows = np.repeat(np.array([D[i, j - 1] for i, j in cells]), reps, axis=0)
    row_cells = np.repeat(np.array(cells, dtype=int), reps, axis=0)
    return DesignMatrix(rows, ps, int(n), level, row_cells)
