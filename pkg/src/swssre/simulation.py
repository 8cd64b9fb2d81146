"""Monte Carlo operating characteristics of re-estimation designs.

Replicate ``s`` of a run with seed ``seed`` draws everything from
``RngStream(seed, s)``. Replicates are processed in fixed blocks of
``BLOCK_SIZE`` consecutive indices; blocks are the unit of parallel work,
so results do not depend on the number of workers.

Fast-path layout of the uniforms of one replicate (C clusters, T periods):

    [0, C)                 cluster effects
    [C, C + T)             period effects (used when sigma_pi^2 > 0)
    [C + T, C + T + C*T)   cell-mean normals, cluster-major
    C + T + C*T            pooled within-cell chi-square, periods 1..t
    C + T + C*T + 1        pooled within-cell chi-square, periods t+1..T

The within-cell sums of squares enter every downstream statistic only
through their total, so each segment draws one chi-square with
``C * |periods| * (n - 1)`` degrees of freedom.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from swssre.design import AllocationMatrix, VarianceComponents, restrict
from swssre.distributions import GENERATOR_ID, RngStream, chi2_from_uniform
from swssre.mixed_model import (
    FULL_MODEL,
    CellSummaries,
    fit_batch,
    interim_columns,
    observed_design,
)
from swssre.power import (
    TestSpec,
    _SplitGeometry,
    critical_value,
    required_n_fixed,
    required_n_reest_batch,
)
from swssre.ssre import BLINDED, UNBLINDED, WITHIN_DIVISORS, blinded_sigma_c_sq, variance_stats_arrays

FIXED = "fixed"
METHODS = (BLINDED, UNBLINDED, FIXED)
BLOCK_SIZE = 250
FLAG_NAMES = (
    "reml_boundary_interim",
    "degenerate_interim",
    "nonconverged_interim",
    "reml_boundary_final",
    "nonconverged_final",
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to simulate one re-estimation design.

    ``n_init=None`` derives the planned size from the assumed variances.
    The lower clamp is either an absolute ``n_min`` or ``n_min_fraction``
    of ``n_init`` (rounded up). ``pi`` holds fixed effects for periods
    2..T; ``sigma_pi_sq > 0`` instead draws all T period effects afresh in
    every replicate. ``method="fixed"`` simulates the conventional design
    and ignores ``t``. ``within_divisor`` selects the denominator of the
    blinded S_Ct^2 (see :data:`swssre.ssre.WITHIN_DIVISORS`).
    """

    X: AllocationMatrix
    t: int
    truth: VarianceComponents
    assumed: VarianceComponents
    test: TestSpec
    method: str
    n_max: int
    tau: float = 0.0
    mu: float = 0.0
    pi: tuple[float, ...] | None = None
    sigma_pi_sq: float = 0.0
    n_init: int | None = None
    n_min: int | None = None
    n_min_fraction: float | None = None
    tau_star: float = 0.0
    within_divisor: str = "cells"
    label: str = ""

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 1 <= self.t <= self.X.T - 1:
            raise ValueError(f"interim period t must lie in [1, {self.X.T - 1}], got {self.t}")
        if self.pi is not None:
            object.__setattr__(self, "pi", tuple(float(v) for v in self.pi))
            if len(self.pi) != self.X.T - 1:
                raise ValueError(f"pi must list effects for periods 2..{self.X.T}")
            if self.sigma_pi_sq > 0:
                raise ValueError("give either fixed pi or sigma_pi_sq, not both")
        if self.within_divisor not in WITHIN_DIVISORS:
            raise ValueError(f"within_divisor must be one of {WITHIN_DIVISORS}")
        if self.sigma_pi_sq < 0:
            raise ValueError("sigma_pi_sq must be non-negative")
        if (self.n_min is None) == (self.n_min_fraction is None):
            raise ValueError("give exactly one of n_min and n_min_fraction")
        if self.n_min_fraction is not None and not self.n_min_fraction > 0:
            raise ValueError("n_min_fraction must be positive")
        if self.n_min is not None and self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.n_init is not None and self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.is_resolved and self.n_min > self.n_max:
            raise ValueError(f"n_min={self.n_min} exceeds n_max={self.n_max}")

    @property
    def is_resolved(self) -> bool:
        return self.n_init is not None and self.n_min is not None

    @property
    def is_fixed(self) -> bool:
        return self.method == FIXED

    def resolve(self) -> "ScenarioSpec":
        """Copy with concrete n_init and n_min."""
        if self.is_resolved:
            return self
        n_init = self.n_init
        if n_init is None:
            n_init = required_n_fixed(self.X, self.assumed, self.test)
        n_min = self.n_min
        if n_min is None:
            n_min = max(1, math.ceil(self.n_min_fraction * n_init - 1e-9))
        return dataclasses.replace(self, n_init=n_init, n_min=n_min, n_min_fraction=None)

    def period_effects(self) -> np.ndarray:
        """Fixed effects of all T periods (period 1 is zero)."""
        if self.pi is None:
            return np.zeros(self.X.T)
        return np.concatenate([[0.0], self.pi])

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "t": self.t,
            "truth": [self.truth.sigma_c_sq, self.truth.sigma_e_sq],
            "assumed": [self.assumed.sigma_c_sq, self.assumed.sigma_e_sq],
            "test": [self.test.alpha, self.test.beta, self.test.delta],
            "method": self.method,
            "n_max": self.n_max,
            "tau": self.tau,
            "mu": self.mu,
            "pi": None if self.pi is None else list(self.pi),
            "sigma_pi_sq": self.sigma_pi_sq,
            "n_init": self.n_init,
            "n_min": self.n_min,
            "n_min_fraction": self.n_min_fraction,
            "tau_star": self.tau_star,
            "within_divisor": self.within_divisor,
            "label": self.label,
        }


@dataclass(frozen=True)
class ReplicateOutcome:
    rejected: bool
    n_reest: int
    n_final: int
    sigma_c_sq_hat: float
    sigma_e_sq_hat: float
    tau_hat: float
    information: float
    statistic: float
    critical_value: float
    flags: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ErrResult:
    """Empirical rejection rate of a scenario with Monte Carlo error."""

    err: float
    mc_se: float
    r: int
    seed: int
    flag_counts: dict
    n_final_summary: dict
    interim_means: dict
    generator: str = GENERATOR_ID

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrialEffects:
    """Realised effects shared by both segments of one replicate."""

    mu: float
    tau: float
    period_effects: np.ndarray  # (T,)
    cluster_effects: np.ndarray  # (C,)
    sigma_e_sq: float


def draw_period_effects(sigma_pi_sq: float, T: int, stream: RngStream) -> np.ndarray:
    """T independent N(0, sigma_pi^2) period effects, period 1 included."""
    if sigma_pi_sq < 0:
        raise ValueError("sigma_pi_sq must be non-negative")
    z = stream.normals(T)
    if sigma_pi_sq == 0:
        return np.zeros(T)
    return math.sqrt(sigma_pi_sq) * z


def simulate_segment(
    X: AllocationMatrix,
    periods: Sequence[int],
    n: int,
    params: TrialEffects,
    stream: RngStream,
    fast: bool = True,
) -> CellSummaries:
    """Cell summaries of ``n`` new individuals per cluster in each period.

    The fast path draws each cell mean and within-cell SS directly; the
    slow path draws individuals and summarises them.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    periods = tuple(periods)
    cols = [p - 1 for p in periods]
    C, T = X.C, X.T
    mean = (
        params.mu
        + params.period_effects[None, cols]
        + params.tau * X.entries[:, cols]
        + params.cluster_effects[:, None]
    )
    se2 = params.sigma_e_sq
    counts = np.zeros((C, T))
    means = np.zeros((C, T))
    ss = np.zeros((C, T))
    if fast:
        z = stream.normals(C * len(cols)).reshape(C, len(cols))
        u = stream.uniforms(C * len(cols)).reshape(C, len(cols))
        means[:, cols] = mean + math.sqrt(se2 / n) * z
        ss[:, cols] = se2 * chi2_from_uniform(u, n - 1)
    else:
        z = stream.normals(C * len(cols) * n).reshape(C, len(cols), n)
        y = mean[:, :, None] + math.sqrt(se2) * z
        m = y.mean(axis=2)
        means[:, cols] = m
        ss[:, cols] = ((y - m[:, :, None]) ** 2).sum(axis=2)
    counts[:, cols] = n
    return CellSummaries(X, periods, counts, means, ss)


# ----------------------------------------------------------------------------
# vectorised replicate engine


class _Plan:
    """Design-dependent quantities reused by every block of a scenario."""

    def __init__(self, sc: ScenarioSpec) -> None:
        self.sc = sc
        X = sc.X
        self.C, self.T = X.C, X.T
        self.t1 = self.T if sc.is_fixed else sc.t
        self.D_full, _ = observed_design(X, tuple(range(1, self.T + 1)), FULL_MODEL)
        self.tau_col = self.D_full.shape[-1] - 1
        if not sc.is_fixed:
            self.interim_spec, self.D_int, _ = interim_columns(X, sc.t)
            self.geometry = _SplitGeometry(X, sc.t)
            self.geometry.check_identified(True)
            self.treated_t = restrict(X, sc.t).treated_cells
        self.n_uniforms = self.C + self.T + self.C * self.T + 2


def _interim_batch(plan: _Plan, counts1, means1, ss1) -> dict:
    sc = plan.sc
    R = counts1.shape[0]
    if sc.method == BLINDED:
        s1, s_ct = variance_stats_arrays(counts1, means1, ss1, sc.within_divisor)
        raw = blinded_sigma_c_sq(s1, s_ct, plan.C, sc.t, sc.n_init, plan.treated_t, sc.tau_star)
        sc_hat = np.maximum(raw, 0.0)
        se_hat = s_ct
        clamped = raw < 0
        degenerate = ~(s_ct > 0)
        nonconv = np.zeros(R, dtype=bool)
    else:
        fit = fit_batch(counts1, means1, ss1, plan.D_int)
        sc_hat, se_hat = fit.sigma_c_sq, fit.sigma_e_sq
        clamped = fit.boundary
        nonconv = ~fit.converged & ~fit.degenerate
        degenerate = fit.degenerate | nonconv
    n_reest = required_n_reest_batch(
        sc.X, sc.t, sc.n_init, sc_hat, np.where(degenerate, 0.0, se_hat), sc.test, sc.n_max, plan.geometry
    )
    n_reest = np.where(degenerate, sc.n_min, n_reest)
    n_final = np.clip(n_reest, sc.n_min, sc.n_max)
    return {
        "sigma_c_sq_hat": sc_hat,
        "sigma_e_sq_hat": se_hat,
        "n_reest": n_reest.astype(np.int64),
        "n_final": n_final.astype(np.int64),
        "reml_boundary_interim": clamped,
        "degenerate_interim": degenerate,
        "nonconverged_interim": nonconv,
    }


def _base_means(plan: _Plan, U: np.ndarray | None, c_z: np.ndarray, p_z: np.ndarray) -> np.ndarray:
    sc = plan.sc
    c = math.sqrt(sc.truth.sigma_c_sq) * c_z  # (R, C)
    if sc.sigma_pi_sq > 0:
        pe = math.sqrt(sc.sigma_pi_sq) * p_z  # (R, T)
    else:
        pe = np.broadcast_to(sc.period_effects(), p_z.shape)
    return sc.mu + pe[:, None, :] + sc.tau * sc.X.entries[None] + c[:, :, None]


def run_block(sc: ScenarioSpec, streams: Sequence[RngStream], fast: bool = True) -> dict:
    """Simulate one replicate per stream; returns per-replicate arrays."""
    sc = sc.resolve()
    plan = _Plan(sc)
    C, T, t1 = plan.C, plan.T, plan.t1
    R = len(streams)
    se2 = sc.truth.sigma_e_sq
    n_init = sc.n_init

    if fast:
        U = np.stack([s.uniforms(plan.n_uniforms) for s in streams])
        c_z = special.ndtri(U[:, :C])
        p_z = special.ndtri(U[:, C : C + T])
        Z = special.ndtri(U[:, C + T : C + T + C * T]).reshape(R, C, T)
        chi_u = U[:, -2:]
    else:
        head = np.stack([s.uniforms(C + T) for s in streams])
        c_z = special.ndtri(head[:, :C])
        p_z = special.ndtri(head[:, C:])
    base = _base_means(plan, None, c_z, p_z)

    def segment(lo: int, hi: int, n: np.ndarray, which: int):
        """Means (R, C, hi-lo) and pooled SS (R,) for periods lo+1..hi."""
        width = hi - lo
        if fast:
            means = base[:, :, lo:hi] + np.sqrt(se2 / n)[:, None, None] * Z[:, :, lo:hi]
            ss = se2 * chi2_from_uniform(chi_u[:, which], C * width * (n - 1))
            return means, ss
        means = np.empty((R, C, width))
        ss = np.empty(R)
        for k, stream in enumerate(streams):
            nk = int(n[k])
            y = base[k, :, lo:hi, None] + math.sqrt(se2) * stream.normals(C * width * nk).reshape(C, width, nk)
            m = y.mean(axis=2)
            means[k] = m
            ss[k] = ((y - m[..., None]) ** 2).sum()
        return means, ss

    n1 = np.full(R, n_init, dtype=np.int64)
    means1, ss1 = segment(0, t1, n1, 0)
    counts1 = np.full((R, C, t1), float(n_init))
    out: dict = {}
    if sc.is_fixed:
        n_final = n1
        n_reest = n1
        out.update(
            sigma_c_sq_hat=np.full(R, np.nan),
            sigma_e_sq_hat=np.full(R, np.nan),
            reml_boundary_interim=np.zeros(R, dtype=bool),
            degenerate_interim=np.zeros(R, dtype=bool),
            nonconverged_interim=np.zeros(R, dtype=bool),
        )
        counts, means, ss = counts1, means1, ss1
    else:
        interim = _interim_batch(plan, counts1, means1, ss1)
        out.update(interim)
        n_final = interim["n_final"]
        n_reest = interim["n_reest"]
        means2, ss2 = segment(t1, T, n_final, 1)
        counts2 = np.broadcast_to(n_final[:, None, None].astype(float), (R, C, T - t1))
        counts = np.concatenate([counts1, counts2], axis=2)
        means = np.concatenate([means1, means2], axis=2)
        ss = ss1 + ss2

    fit = fit_batch(counts, means, ss, plan.D_full)
    tau_hat = fit.beta[:, plan.tau_col]
    var_tau = fit.cov_scaled[:, plan.tau_col, plan.tau_col]
    with np.errstate(divide="ignore", invalid="ignore"):
        info = 1.0 / var_tau
        stat = tau_hat * np.sqrt(info)
    t_split = T if sc.is_fixed else sc.t
    nu = n_init * C * t_split + n_final * C * (T - t_split) - C - T
    crit = critical_value(sc.test.alpha, nu.astype(float))
    rejected = np.where(np.isnan(stat), False, stat > crit)
    out.update(
        rejected=rejected,
        n_reest=np.asarray(n_reest, dtype=np.int64),
        n_final=np.asarray(n_final, dtype=np.int64),
        tau_hat=tau_hat,
        information=info,
        statistic=stat,
        critical_value=crit,
        reml_boundary_final=fit.boundary,
        nonconverged_final=~fit.converged,
    )
    return out


def _block_task(args) -> dict:
    sc, seed, start, stop, fast = args
    streams = [RngStream(seed, s) for s in range(start, stop)]
    return run_block(sc, streams, fast)


def simulate_trial(scenario: ScenarioSpec, stream: RngStream, fast: bool = True) -> ReplicateOutcome:
    """One complete replicate drawn from ``stream``."""
    out = run_block(scenario, [stream], fast)
    return ReplicateOutcome(
        rejected=bool(out["rejected"][0]),
        n_reest=int(out["n_reest"][0]),
        n_final=int(out["n_final"][0]),
        sigma_c_sq_hat=float(out["sigma_c_sq_hat"][0]),
        sigma_e_sq_hat=float(out["sigma_e_sq_hat"][0]),
        tau_hat=float(out["tau_hat"][0]),
        information=float(out["information"][0]),
        statistic=float(out["statistic"][0]),
        critical_value=float(out["critical_value"][0]),
        flags={name: bool(out[name][0]) for name in FLAG_NAMES},
    )


def _blocks(r: int, block_size: int) -> list[tuple[int, int]]:
    # streams are numbered 1..r
    return [(lo, min(lo + block_size, r + 1)) for lo in range(1, r + 1, block_size)]


def run_replicates(
    scenario: ScenarioSpec,
    r: int,
    seed: int,
    workers: int = 1,
    fast: bool = True,
    block_size: int = BLOCK_SIZE,
) -> dict:
    """Per-replicate arrays for streams (seed, 1..r), in replicate order."""
    if r < 1:
        raise ValueError("r must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    sc = scenario.resolve()
    tasks = [(sc, seed, lo, hi, fast) for lo, hi in _blocks(r, block_size)]
    if workers == 1 or len(tasks) == 1:
        parts = [_block_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_task, tasks))
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def summarize_replicates(arrays: dict, seed: int) -> ErrResult:
    rejected = arrays["rejected"]
    r = rejected.size
    err = float(rejected.mean())
    n_final = arrays["n_final"].astype(float)
    qs = np.quantile(n_final, [0.1, 0.25, 0.5, 0.75, 0.9])
    summary = {
        "min": float(n_final.min()),
        "mean": float(n_final.mean()),
        "max": float(n_final.max()),
        "q10": float(qs[0]),
        "q25": float(qs[1]),
        "median": float(qs[2]),
        "q75": float(qs[3]),
        "q90": float(qs[4]),
    }
    sc_hat = arrays["sigma_c_sq_hat"]
    se_hat = arrays["sigma_e_sq_hat"]
    interim = {
        "sigma_c_sq_hat": float(np.nanmean(sc_hat)) if np.isfinite(sc_hat).any() else float("nan"),
        "sigma_e_sq_hat": float(np.nanmean(se_hat)) if np.isfinite(se_hat).any() else float("nan"),
    }
    return ErrResult(
        err=err,
        mc_se=math.sqrt(err * (1.0 - err) / r),
        r=r,
        seed=int(seed),
        flag_counts={name: int(np.count_nonzero(arrays[name])) for name in FLAG_NAMES},
        n_final_summary=summary,
        interim_means=interim,
    )


def estimate_err(
    scenario: ScenarioSpec,
    r: int,
    seed: int,
    workers: int = 1,
    fast: bool = True,
) -> ErrResult:
    """Empirical rejection rate over ``r`` replicates on streams (seed, 1..r)."""
    arrays = run_replicates(scenario, r, seed, workers, fast)
    return summarize_replicates(arrays, seed)


def interim_statistics(scenario: ScenarioSpec, r: int, seed: int) -> dict:
    """Blinded interim statistics of ``r`` simulated first segments.

    Returns arrays ``s1_sq``, ``s_ct_sq``, ``sigma_c_sq_hat`` and
    ``sigma_e_sq_hat``; the streams match those of :func:`estimate_err`.
    """
    sc = scenario.resolve()
    plan = _Plan(sc)
    C, T, t = plan.C, plan.T, sc.t
    parts = []
    for lo, hi in _blocks(r, BLOCK_SIZE):
        U = np.stack([RngStream(seed, s).uniforms(plan.n_uniforms) for s in range(lo, hi)])
        R = U.shape[0]
        base = _base_means(plan, U, special.ndtri(U[:, :C]), special.ndtri(U[:, C : C + T]))
        Z = special.ndtri(U[:, C + T : C + T + C * T]).reshape(R, C, T)
        means = base[:, :, :t] + math.sqrt(sc.truth.sigma_e_sq / sc.n_init) * Z[:, :, :t]
        ss = sc.truth.sigma_e_sq * chi2_from_uniform(U[:, -2], C * t * (sc.n_init - 1))
        counts = np.full((R, C, t), float(sc.n_init))
        s1, s_ct = variance_stats_arrays(counts, means, ss, sc.within_divisor)
        raw = blinded_sigma_c_sq(s1, s_ct, C, t, sc.n_init, plan.treated_t, sc.tau_star)
        parts.append({"s1_sq": s1, "s_ct_sq": s_ct, "sigma_c_sq_hat": np.maximum(raw, 0.0), "sigma_e_sq_hat": s_ct})
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


__all__ = [
    "BLOCK_SIZE",
    "ErrResult",
    "FIXED",
    "METHODS",
    "ReplicateOutcome",
    "ScenarioSpec",
    "TrialEffects",
    "draw_period_effects",
    "estimate_err",
    "interim_statistics",
    "run_block",
    "run_replicates",
    "simulate_segment",
    "simulate_trial",
    "summarize_replicates",
]
