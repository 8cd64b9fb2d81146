"""Information, critical values, power and sample-size searches.

A trial of T periods is viewed as two segments: periods 1..t recruit
``n_init`` per cluster per period and periods t+1..T recruit ``n_post``.
The conventional fixed design is the degenerate split ``t = T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from swssre.design import AllocationMatrix, VarianceComponents, cell_design
from swssre.distributions import shifted_t_tail, t_quantile
from swssre.mixed_model import FULL_MODEL, IdentificationError, _check_rank, model_columns

MAX_SEARCH_N = 10**6


@dataclass(frozen=True)
class TestSpec:
    """One-sided test of H0: tau <= 0 powered at tau = delta."""

    __test__ = False  # keep pytest from collecting this class

    alpha: float
    beta: float
    delta: float

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def target_power(self) -> float:
        return 1.0 - self.beta


@dataclass(frozen=True)
class SplitDesign:
    X: AllocationMatrix
    t: int
    n_init: int
    n_post: int

    def __post_init__(self) -> None:
        if not 1 <= self.t <= self.X.T:
            raise ValueError(f"t must lie in [1, {self.X.T}], got {self.t}")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.n_post < 0:
            raise ValueError("n_post must be >= 0")

    @classmethod
    def fixed(cls, X: AllocationMatrix, n: int) -> "SplitDesign":
        return cls(X, X.T, n, 0)


def dof_fixed(n: int, C: int, T: int) -> int:
    nu = n * C * T - C - T
    if nu < 1:
        raise ValueError(f"degrees of freedom {nu} < 1")
    return nu


def _dof_split_raw(X: AllocationMatrix, t: int, n_init, n_post):
    return n_init * X.C * t + n_post * X.C * (X.T - t) - X.C - X.T


def dof_split(sd: SplitDesign) -> int:
    nu = int(_dof_split_raw(sd.X, sd.t, sd.n_init, sd.n_post))
    if nu < 1:
        raise ValueError(f"degrees of freedom {nu} < 1")
    return nu


def critical_value(alpha: float, nu):
    return t_quantile(1.0 - alpha, nu)


class _SplitGeometry:
    """Per-segment design sums for fast repeated information evaluations."""

    def __init__(self, X: AllocationMatrix, t: int) -> None:
        self.X = X
        self.t = t
        D = cell_design(X)  # (C, T, p)
        self.D = D
        self.G1 = np.einsum("ctp,ctq->pq", D[:, :t], D[:, :t])
        self.G2 = np.einsum("ctp,ctq->pq", D[:, t:], D[:, t:])
        self.S1 = D[:, :t].sum(axis=1)
        self.S2 = D[:, t:].sum(axis=1)
        self.p = D.shape[-1]

    def check_identified(self, with_post: bool) -> None:
        T = self.X.T
        rows = self.D if with_post else self.D[:, : self.t]
        _check_rank(rows, model_columns(T, range(1, T + 1), FULL_MODEL), T)

    def information(self, n_init, n_post, sigma_c_sq, sigma_e_sq) -> np.ndarray:
        """Information for tau, vectorised over replicates."""
        n_post = np.atleast_1d(np.asarray(n_post, dtype=float))
        sc = np.broadcast_to(np.asarray(sigma_c_sq, dtype=float), n_post.shape)
        se = np.broadcast_to(np.asarray(sigma_e_sq, dtype=float), n_post.shape)
        T = self.X.T
        gamma = sc / se
        M = n_init * self.t + n_post * (T - self.t)  # same for every cluster
        w = gamma / (1.0 + M * gamma)
        S = n_init * self.S1[None] + n_post[:, None, None] * self.S2[None]  # (R, C, p)
        G = n_init * self.G1[None] + n_post[:, None, None] * self.G2[None]
        B = G - w[:, None, None] * np.matmul(np.swapaxes(S, 1, 2), S)
        unit = np.zeros((n_post.size, self.p, 1))
        unit[:, T, 0] = 1.0
        col = np.linalg.solve(B, unit)[:, T, 0]
        return 1.0 / (se * col)


def information_split(sd: SplitDesign, vc: VarianceComponents) -> float:
    """Information for tau of the two-segment design at variances ``vc``."""
    geo = _SplitGeometry(sd.X, sd.t)
    with_post = sd.n_post > 0 and sd.t < sd.X.T
    geo.check_identified(with_post)
    n_post = sd.n_post if with_post else 0
    return float(geo.information(sd.n_init, n_post, vc.sigma_c_sq, vc.sigma_e_sq)[0])


def _power_from_info(info, nu, ts: TestSpec):
    nu = np.asarray(nu, dtype=float)
    ok = nu >= 1
    safe_nu = np.where(ok, nu, 1.0)
    e = critical_value(ts.alpha, safe_nu)
    pw = shifted_t_tail(e, ts.delta * np.sqrt(info), safe_nu)
    return np.where(ok, pw, 0.0)


def power_split(sd: SplitDesign, vc: VarianceComponents, ts: TestSpec) -> float:
    """Planned power of the two-segment design."""
    info = information_split(sd, vc)
    nu = dof_split(sd)
    return float(shifted_t_tail(critical_value(ts.alpha, nu), ts.delta * math.sqrt(info), nu))


def power_fixed(X: AllocationMatrix, n: int, vc: VarianceComponents, ts: TestSpec) -> float:
    """Power of the conventional design with ``n`` per cluster per period (0 if nu < 1)."""
    if n * X.C * X.T - X.C - X.T < 1:
        return 0.0
    return power_split(SplitDesign.fixed(X, n), vc, ts)


def required_n_fixed(X: AllocationMatrix, vc_assumed: VarianceComponents, ts: TestSpec) -> int:
    """Smallest n per cluster per period giving the target power."""
    SplitDesign.fixed(X, 1)
    _SplitGeometry(X, X.T).check_identified(False)
    target = ts.target_power

    def ok(n: int) -> bool:
        return power_fixed(X, n, vc_assumed, ts) >= target

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > MAX_SEARCH_N:
            raise ValueError(f"no n <= {MAX_SEARCH_N} attains power {target}")
    lo = hi // 2  # ok(lo) is False (or lo == 0)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    assert ok(hi) and (hi == 1 or not ok(hi - 1))
    return hi


def required_n_reest_batch(
    X: AllocationMatrix,
    t: int,
    n_init: int,
    sigma_c_sq: np.ndarray,
    sigma_e_sq: np.ndarray,
    ts: TestSpec,
    n_cap: int,
    geometry: _SplitGeometry | None = None,
) -> np.ndarray:
    """Vectorised minimal n_post in [1, n_cap]; n_cap when nothing suffices.

    Entries with sigma_e_sq <= 0 are returned as 0 and left to the caller.
    """
    sc = np.asarray(sigma_c_sq, dtype=float)
    se = np.asarray(sigma_e_sq, dtype=float)
    valid = se > 0
    se_safe = np.where(valid, se, 1.0)
    sc_safe = np.where(valid, sc, 0.0)
    geo = geometry or _SplitGeometry(X, t)
    target = ts.target_power
    lo = np.zeros(sc.shape, dtype=np.int64)
    hi = np.full(sc.shape, int(n_cap), dtype=np.int64)
    for _ in range(max(1, int(n_cap).bit_length())):
        active = hi - lo > 1
        if not active.any():
            break
        # settled entries evaluate at hi >= 1 so segment 2 never vanishes
        mid = np.where(active, (lo + hi) // 2, hi)
        info = geo.information(n_init, mid, sc_safe, se_safe)
        pw = _power_from_info(info, _dof_split_raw(X, t, n_init, mid), ts)
        good = pw >= target
        hi = np.where(active & good, mid, hi)
        lo = np.where(active & ~good, mid, lo)
    return np.where(valid, hi, 0)


def required_n_reest(
    X: AllocationMatrix,
    t: int,
    n_init: int,
    vc_hat: VarianceComponents,
    ts: TestSpec,
    n_cap: int,
) -> int:
    """Smallest post-interim n per cluster per period giving the target power."""
    if not 1 <= t <= X.T - 1:
        raise ValueError(f"interim period must lie in [1, {X.T - 1}], got {t}")
    if n_cap < 1:
        raise ValueError("n_cap must be >= 1")
    geo = _SplitGeometry(X, t)
    geo.check_identified(True)
    out = required_n_reest_batch(
        X, t, n_init, np.array([vc_hat.sigma_c_sq]), np.array([vc_hat.sigma_e_sq]), ts, n_cap, geo
    )
    return int(out[0])


def clamp_n(n_reest, n_min: int, n_max: int):
    """Clamp the re-estimated size into [n_min, n_max]."""
    if not 1 <= n_min <= n_max:
        raise ValueError(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    out = np.clip(n_reest, n_min, n_max)
    return int(out) if np.ndim(out) == 0 else out


__all__ = [
    "IdentificationError",
    "SplitDesign",
    "TestSpec",
    "clamp_n",
    "critical_value",
    "dof_fixed",
    "dof_split",
    "information_split",
    "power_fixed",
    "power_split",
    "required_n_fixed",
    "required_n_reest",
    "required_n_reest_batch",
]
