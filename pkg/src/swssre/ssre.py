"""Interim variance re-estimation and the re-sized post-interim sample.

The blinded route uses only the one-sample variance S1^2, the cell-wise
variance S_Ct^2 and the design constant sum(X^(t)); the unblinded route
refits the appropriate interim mixed model by REML.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from swssre.design import AllocationMatrix, VarianceComponents, restrict
from swssre.mixed_model import CellSummaries, reml_fit, select_interim_model
from swssre.power import SplitDesign, TestSpec, clamp_n, dof_split, required_n_reest

if TYPE_CHECKING:
    from swssre.simulation import ScenarioSpec

logger = logging.getLogger(__name__)

BLINDED = "blinded"
UNBLINDED = "unblinded"
# Denominator of the pooled within-cell variance: N - Ct gives the unbiased
# S_Ct^2; N - 1 is the plain sample variance of the within-cell residuals.
WITHIN_DIVISORS = ("cells", "total")


@dataclass(frozen=True)
class InterimEstimate:
    sigma_c_sq_hat: float
    sigma_e_sq_hat: float
    method: str
    s1_sq: float | None = None
    s_ct_sq: float | None = None
    clamped_at_zero: bool = False
    degenerate: bool = False
    converged: bool = True

    @property
    def variance(self) -> VarianceComponents:
        return VarianceComponents(self.sigma_c_sq_hat, self.sigma_e_sq_hat)


@dataclass(frozen=True)
class SsreDecision:
    n_reest: int
    n_final: int
    estimate: InterimEstimate
    dof_final: int


def _check_divisor(within_divisor: str) -> None:
    if within_divisor not in WITHIN_DIVISORS:
        raise ValueError(f"within_divisor must be one of {WITHIN_DIVISORS}, got {within_divisor!r}")


def variance_stats_arrays(counts, means, ss_total, within_divisor: str = "cells"):
    """(S1^2, S_Ct^2) from (R, C, t) counts/means and pooled within SS (R,)."""
    _check_divisor(within_divisor)
    N = counts.sum(axis=(1, 2))
    n_cells = (counts > 0).sum(axis=(1, 2))
    grand = (counts * means).sum(axis=(1, 2)) / N
    between = (counts * (means - grand[:, None, None]) ** 2).sum(axis=(1, 2))
    s1 = (ss_total + between) / (N - 1)
    s_ct = ss_total / (N - n_cells if within_divisor == "cells" else N - 1)
    return s1, s_ct


def one_sample_variance_stats(cells: CellSummaries, within_divisor: str = "cells") -> tuple[float, float]:
    """One-sample variance S1^2 and pooled within-cell variance S_Ct^2."""
    counts, means, ss = cells.observed()
    N = counts.sum()
    if N <= 1:
        raise ValueError("S1^2 needs at least two observations")
    if N <= counts.size:
        raise ValueError("S_Ct^2 needs a cell with at least two observations")
    s1, s_ct = variance_stats_arrays(counts[None], means[None], np.array([ss.sum()]), within_divisor)
    return float(s1[0]), float(s_ct[0])


def blinded_sigma_c_sq(s1_sq, sigma_e_sq, C: int, t: int, n: int, treated: int, tau_star: float):
    """Moment estimator of sigma_c^2 before truncation at zero.

    Inverts E(S1^2) under no period effects with tau = tau_star.
    """
    N = n * C * t
    bracket = (
        s1_sq
        - sigma_e_sq
        - n * tau_star**2 / (N - 1) * treated
        + n**2 * tau_star**2 / (N * (N - 1)) * treated**2
    )
    return (N - 1) / N * C / (C - 1) * bracket


def blinded_estimate(
    cells: CellSummaries,
    X_t: AllocationMatrix,
    n_init: int,
    tau_star: float = 0.0,
    within_divisor: str = "cells",
) -> InterimEstimate:
    """Blinded variance estimates after period t = X_t.T.

    Treatment labels enter only through sum(X^(t)).
    """
    C, t = X_t.C, X_t.T
    if C < 2:
        raise ValueError("blinded estimation needs at least two clusters")
    s1, s_ct = one_sample_variance_stats(cells.restrict(t), within_divisor)
    raw = blinded_sigma_c_sq(s1, s_ct, C, t, n_init, X_t.treated_cells, tau_star)
    return InterimEstimate(
        sigma_c_sq_hat=max(float(raw), 0.0),
        sigma_e_sq_hat=s_ct,
        method=BLINDED,
        s1_sq=s1,
        s_ct_sq=s_ct,
        clamped_at_zero=bool(raw < 0),
        degenerate=s_ct <= 0,
    )


def unblinded_estimate(cells: CellSummaries, X_t: AllocationMatrix, t: int) -> InterimEstimate:
    """REML estimates from the interim model selected for period t."""
    spec = select_interim_model(X_t, t)
    fit = reml_fit(cells.restrict(t), spec)
    return InterimEstimate(
        sigma_c_sq_hat=fit.sigma_c_sq,
        sigma_e_sq_hat=fit.sigma_e_sq,
        method=UNBLINDED,
        clamped_at_zero=fit.boundary,
        degenerate=fit.degenerate or not fit.converged,
        converged=fit.converged,
    )


def interim_reestimate(cells: CellSummaries, scenario: "ScenarioSpec") -> SsreDecision:
    """Estimate the variances at the interim and choose n_final."""
    sc = scenario.resolve()
    if sc.method not in (BLINDED, UNBLINDED):
        raise ValueError(f"no interim step for method {sc.method!r}")
    X_t = restrict(sc.X, sc.t)
    if sc.method == BLINDED:
        est = blinded_estimate(cells, X_t, sc.n_init, sc.tau_star, sc.within_divisor)
    else:
        est = unblinded_estimate(cells, X_t, sc.t)
    return decide_n(est, sc.X, sc.t, sc.n_init, sc.test, sc.n_min, sc.n_max)


def decide_n(
    est: InterimEstimate,
    X: AllocationMatrix,
    t: int,
    n_init: int,
    test: TestSpec,
    n_min: int,
    n_max: int,
) -> SsreDecision:
    """Turn interim variance estimates into the clamped post-interim size.

    A degenerate estimate carries no information about the variances and
    falls back to ``n_min``.
    """
    if est.degenerate:
        logger.info("degenerate interim estimate; using n_min=%d", n_min)
        n_reest = n_min
    else:
        n_reest = required_n_reest(X, t, n_init, est.variance, test, n_max)
    n_final = clamp_n(n_reest, n_min, n_max)
    nu = dof_split(SplitDesign(X, t, n_init, n_final))
    return SsreDecision(n_reest=int(n_reest), n_final=int(n_final), estimate=est, dof_final=nu)


__all__ = [
    "BLINDED",
    "UNBLINDED",
    "WITHIN_DIVISORS",
    "InterimEstimate",
    "SsreDecision",
    "TestSpec",
    "blinded_estimate",
    "blinded_sigma_c_sq",
    "decide_n",
    "interim_reestimate",
    "one_sample_variance_stats",
    "unblinded_estimate",
    "variance_stats_arrays",
]
