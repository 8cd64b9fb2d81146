"""REML fitting of the Hussey-Hughes mixed model on cluster-period summaries.

Within a cluster every observation shares the random intercept, so the
individual-level covariance of cluster i is ``sigma_e^2 I + sigma_c^2 J``.
The likelihood therefore depends on the data only through cell counts,
cell means and the pooled within-cell sum of squares, and every quantity
below is accumulated per cluster in closed form.

The batched functions (``*_batch``) carry a leading replicate axis and are
what the simulation uses; the scalar API wraps them with a batch of one.
Each replicate's result is computed independently of the others in the
batch, which keeps parallel runs reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from swssre.design import AllocationMatrix, VarianceComponents, cell_design, restrict

LOG_2PI = float(np.log(2.0 * np.pi))
RHO_MAX = 1.0 - 1e-10
BISECTION_STEPS = 60


class IdentificationError(ValueError):
    """The fixed-effect design is rank deficient."""


@dataclass(frozen=True)
class ModelSpec:
    include_period_effects: bool = True
    include_treatment_effect: bool = True


FULL_MODEL = ModelSpec(True, True)


@dataclass(frozen=True, eq=False)
class CellSummaries:
    """Sufficient statistics of every observed cluster-period cell.

    ``counts``, ``means`` and ``ss`` are C x T arrays over the whole trial;
    cells in unobserved periods have count 0. ``periods`` lists the observed
    (1-based) periods, always a contiguous run.
    """

    X: AllocationMatrix
    periods: tuple[int, ...]
    counts: np.ndarray
    means: np.ndarray
    ss: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.X.C, self.X.T)
        for name in ("counts", "means", "ss"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "periods", tuple(int(p) for p in self.periods))
        cols = [p - 1 for p in self.periods]
        obs = self.counts[:, cols]
        if np.any(obs < 1):
            raise ValueError("every observed cell needs at least one observation")
        if np.any(self.ss[:, cols] < 0):
            raise ValueError("within-cell sums of squares must be non-negative")
        if np.any((obs == 1) & (self.ss[:, cols] != 0)):
            raise ValueError("a single-observation cell must have SS = 0")

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def n_cells(self) -> int:
        return self.X.C * len(self.periods)

    @property
    def within_ss(self) -> float:
        return float(self.ss.sum())

    def observed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(counts, means, ss) restricted to the observed periods."""
        sl = slice(self.periods[0] - 1, self.periods[-1])
        return self.counts[:, sl], self.means[:, sl], self.ss[:, sl]

    def restrict(self, t: int) -> "CellSummaries":
        """Summaries of periods 1..t only."""
        keep = tuple(p for p in self.periods if p <= t)
        if not keep:
            raise ValueError(f"no observed periods up to {t}")
        mask = np.zeros(self.X.T, dtype=bool)
        mask[[p - 1 for p in keep]] = True
        return CellSummaries(
            self.X,
            keep,
            np.where(mask, self.counts, 0.0),
            np.where(mask, self.means, 0.0),
            np.where(mask, self.ss, 0.0),
        )


def merge(a: CellSummaries, b: CellSummaries) -> CellSummaries:
    """Pool two summaries of the same trial cell by cell."""
    if a.X != b.X:
        raise ValueError("summaries belong to different designs")
    periods = tuple(sorted(set(a.periods) | set(b.periods)))
    if periods != tuple(range(periods[0], periods[-1] + 1)):
        raise ValueError("merged periods must be contiguous")
    n = a.counts + b.counts
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, (a.counts * a.means + b.counts * b.means) / n, 0.0)
        delta = a.means - b.means
        ss = a.ss + b.ss + np.where(n > 0, a.counts * b.counts / n * delta**2, 0.0)
    return CellSummaries(a.X, periods, n, mean, ss)


def summarize(
    observations: Iterable[Sequence[float]],
    X: AllocationMatrix,
    periods: Iterable[int] | None = None,
) -> CellSummaries:
    """Reduce ``(cluster, period, value)`` triples to cell summaries.

    Clusters are 0-based row indices of ``X``; periods are 1-based.
    ``periods`` defaults to the periods that appear in the data.
    """
    obs = np.asarray(list(observations), dtype=float).reshape(-1, 3)
    ci = obs[:, 0].astype(int)
    pj = obs[:, 1].astype(int)
    if np.any(ci != obs[:, 0]) or np.any(pj != obs[:, 1]):
        raise ValueError("cluster and period labels must be integers")
    if np.any((ci < 0) | (ci >= X.C)) or np.any((pj < 1) | (pj > X.T)):
        raise ValueError("observation references a cell outside the design")
    if periods is None:
        periods = sorted(set(pj.tolist()))
    periods = tuple(sorted(int(p) for p in periods))
    if not set(pj.tolist()) <= set(periods):
        raise ValueError("observation references a period outside the observed set")
    y = obs[:, 2]
    cell = ci * X.T + (pj - 1)
    size = X.C * X.T
    counts = np.bincount(cell, minlength=size).astype(float)
    sums = np.bincount(cell, weights=y, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / counts, 0.0)
    dev = y - means[cell]
    ss = np.bincount(cell, weights=dev * dev, minlength=size)
    shape = (X.C, X.T)
    return CellSummaries(X, periods, counts.reshape(shape), means.reshape(shape), ss.reshape(shape))


def select_interim_model(X_t: AllocationMatrix, t: int) -> ModelSpec:
    """Reduced model for an interim fit after period ``t``."""
    return ModelSpec(include_period_effects=t > 1, include_treatment_effect=X_t.treated_cells > 0)


# ----------------------------------------------------------------------------
# design columns


def model_columns(T: int, periods: Sequence[int], spec: ModelSpec) -> list[int]:
    """Indices into the (T + 1)-vector beta of the coefficients being fitted."""
    cols = [0]
    if spec.include_period_effects:
        cols += [p - 1 for p in periods if p >= 2]
    if spec.include_treatment_effect:
        cols.append(T)
    return cols


def column_names(T: int) -> list[str]:
    return ["mu"] + [f"pi_{j}" for j in range(2, T + 1)] + ["tau"]


def _check_rank(D_obs: np.ndarray, cols: Sequence[int], T: int) -> None:
    rows = D_obs.reshape(-1, D_obs.shape[-1])
    names = column_names(T)
    for k in range(1, rows.shape[1] + 1):
        if np.linalg.matrix_rank(rows[:, :k]) < k:
            raise IdentificationError(f"coefficient {names[cols[k - 1]]} is not identified by the design")


def observed_design(X: AllocationMatrix, periods: Sequence[int], spec: ModelSpec) -> tuple[np.ndarray, list[int]]:
    """Design rows (C, |periods|, p) for the fitted columns, rank-checked."""
    cols = model_columns(X.T, periods, spec)
    sl = slice(periods[0] - 1, periods[-1])
    D = cell_design(X)[:, sl][:, :, cols]
    _check_rank(D, cols, X.T)
    return D, cols


# ----------------------------------------------------------------------------
# batched core


@dataclass
class _Stats:
    G: np.ndarray  # (R, p, p)   sum m d d'
    S: np.ndarray  # (R, C, p)   per-cluster sum m d
    Y: np.ndarray  # (R, C)      per-cluster sum m ybar (centred)
    g: np.ndarray  # (R, p)      sum m ybar d
    yy: np.ndarray  # (R,)       total centred sum of squares
    M: np.ndarray  # (R, C)      per-cluster counts
    N: np.ndarray  # (R,)
    grand: np.ndarray  # (R,)

    @property
    def p(self) -> int:
        return self.G.shape[-1]


def _stats(counts: np.ndarray, means: np.ndarray, ss: np.ndarray, D: np.ndarray) -> _Stats:
    """counts/means: (R, C, t); ss: (R,) pooled within SS; D: (C, t, p)."""
    R, C, t = counts.shape
    p = D.shape[-1]
    N = counts.sum(axis=(1, 2))
    grand = (counts * means).sum(axis=(1, 2)) / N
    yc = means - grand[:, None, None]
    Dflat = D.reshape(C * t, p)
    mflat = counts.reshape(R, C * t)
    G = np.matmul(np.swapaxes(mflat[:, :, None] * Dflat[None], 1, 2), Dflat[None])
    S = (counts[..., None] * D[None]).sum(axis=2)
    my = counts * yc
    Y = my.sum(axis=2)
    g = (my.reshape(R, C * t)[:, :, None] * Dflat[None]).sum(axis=1)
    yy = ss + (counts * yc * yc).sum(axis=(1, 2))
    M = counts.sum(axis=2)
    return _Stats(G, S, Y, g, yy, M, N, grand)


def _solve_at(st: _Stats, rho: np.ndarray) -> dict:
    """GLS quantities at ICC-like parameter rho = gamma / (1 + gamma)."""
    rho = np.asarray(rho, dtype=float)
    a = (1.0 - rho)[:, None] + st.M * rho[:, None]  # (R, C)
    w = rho[:, None] / a  # sigma_c^2 / (sigma_e^2 + M sigma_c^2) * sigma_e^2
    Sw = st.S * w[:, :, None]
    B = st.G - np.matmul(np.swapaxes(Sw, 1, 2), st.S)
    b = st.g - (Sw * st.Y[:, :, None]).sum(axis=1)
    q = st.yy - (w * st.Y * st.Y).sum(axis=1)
    rhs = np.concatenate([b[:, :, None], np.swapaxes(st.S, 1, 2)], axis=2)
    sol = np.linalg.solve(B, rhs)
    beta = sol[:, :, 0]
    Q = q - (b * beta).sum(axis=1)
    e = st.Y - (st.S * beta[:, None, :]).sum(axis=2)
    h = (st.S * np.swapaxes(sol[:, :, 1:], 1, 2)).sum(axis=2)
    return {"a": a, "w": w, "B": B, "beta": beta, "Q": Q, "e": e, "h": h}


def _profile_score(st: _Stats, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantity with the sign of d(profiled REML)/d rho, and Q.

    Equals 2 (dl/dgamma) / (1 - rho), finite on [0, 1].
    """
    r = _solve_at(st, rho)
    a, Q, e, h = r["a"], r["Q"], r["e"], r["h"]
    Qs = np.where(Q > 0, Q, 1.0)
    dof = st.N - st.p
    one_m = (1.0 - rho)[:, None]
    score = (
        dof * (one_m * e * e / (a * a)).sum(axis=1) / Qs
        - (st.M / a).sum(axis=1)
        + (one_m * h / (a * a)).sum(axis=1)
    )
    return score, Q


def _loglik_at(st: _Stats, sigma_c_sq: np.ndarray, sigma_e_sq: np.ndarray) -> tuple[np.ndarray, dict]:
    gamma = sigma_c_sq / sigma_e_sq
    rho = gamma / (1.0 + gamma)
    r = _solve_at(st, rho)
    _, logdetB = np.linalg.slogdet(r["B"])
    p = st.p
    ll = -0.5 * (
        (st.N - p) * LOG_2PI
        + (st.N - p) * np.log(sigma_e_sq)
        + np.log1p(st.M * gamma[:, None]).sum(axis=1)
        + logdetB
        + r["Q"] / sigma_e_sq
    )
    return ll, r


def _gradient_at(st: _Stats, sigma_c_sq: np.ndarray, sigma_e_sq: np.ndarray) -> np.ndarray:
    """Analytic REML gradient in (sigma_c^2, sigma_e^2); shape (R, 2)."""
    gamma = sigma_c_sq / sigma_e_sq
    rho = gamma / (1.0 + gamma)
    r = _solve_at(st, rho)
    one_pg = 1.0 + st.M * gamma[:, None]
    wp = 1.0 / (one_pg * one_pg)
    dl_dgamma = -0.5 * (
        (st.M / one_pg).sum(axis=1)
        - (wp * r["h"]).sum(axis=1)
        - (wp * r["e"] * r["e"]).sum(axis=1) / sigma_e_sq
    )
    dl_dse_fixed_gamma = -0.5 * ((st.N - st.p) / sigma_e_sq - r["Q"] / sigma_e_sq**2)
    d_sc = dl_dgamma / sigma_e_sq
    d_se = dl_dse_fixed_gamma - dl_dgamma * sigma_c_sq / sigma_e_sq**2
    return np.stack([d_sc, d_se], axis=1)


@dataclass
class BatchFit:
    sigma_c_sq: np.ndarray
    sigma_e_sq: np.ndarray
    beta: np.ndarray  # (R, p) in fitted-column order, intercept uncentred
    cov_scaled: np.ndarray  # (R, p, p) = (D' Sigma^-1 D)^-1
    loglik: np.ndarray
    converged: np.ndarray
    boundary: np.ndarray
    degenerate: np.ndarray


def fit_batch(counts: np.ndarray, means: np.ndarray, ss: np.ndarray, D: np.ndarray) -> BatchFit:
    """REML fit of R independent datasets sharing the design rows ``D``.

    The profiled criterion is maximised over rho = gamma / (1 + gamma) in
    [0, 1) by bisection on the sign of its analytic derivative, with a
    fixed number of steps so every replicate follows the same arithmetic.
    """
    st = _stats(counts, means, ss, D)
    R = counts.shape[0]
    if np.any(st.N <= st.p + 2):
        raise ValueError("too few observations for the number of fixed effects")
    zeros = np.zeros(R)
    s0, Q0 = _profile_score(st, zeros)
    scale = np.maximum(st.yy, np.finfo(float).tiny)
    degenerate = (Q0 <= 1e-12 * scale) | (st.yy <= 0)
    hi = np.full(R, RHO_MAX)
    s_hi, _ = _profile_score(st, hi)
    boundary = (s0 <= 0) | degenerate
    runaway = ~boundary & (s_hi > 0)
    lo = zeros.copy()
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        s, _ = _profile_score(st, mid)
        up = s > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    rho = np.where(boundary, 0.0, np.where(runaway, RHO_MAX, 0.5 * (lo + hi)))
    r = _solve_at(st, rho)
    dof = st.N - st.p
    sigma_e_sq = np.maximum(r["Q"], 0.0) / dof
    gamma = rho / (1.0 - rho)
    sigma_c_sq = gamma * sigma_e_sq
    degenerate = degenerate | (sigma_e_sq <= 1e-12 * scale / dof)
    Binv = np.linalg.inv(r["B"])
    cov_scaled = Binv * sigma_e_sq[:, None, None]
    beta = r["beta"].copy()
    beta[:, 0] += st.grand
    safe_e = np.where(sigma_e_sq > 0, sigma_e_sq, 1.0)
    ll, _ = _loglik_at(st, np.where(sigma_e_sq > 0, sigma_c_sq, 0.0), safe_e)
    ll = np.where(sigma_e_sq > 0, ll, np.inf)
    return BatchFit(
        sigma_c_sq=sigma_c_sq,
        sigma_e_sq=sigma_e_sq,
        beta=beta,
        cov_scaled=cov_scaled,
        loglik=ll,
        converged=~runaway & ~degenerate,
        boundary=boundary,
        degenerate=degenerate,
    )


# ----------------------------------------------------------------------------
# scalar API


@dataclass(frozen=True)
class FitResult:
    """REML fit of one dataset.

    ``beta_hat`` has length T + 1 in (mu, pi_2..pi_T, tau) order; entries of
    coefficients absent from the model are NaN.
    """

    sigma_c_sq: float
    sigma_e_sq: float
    beta_hat: np.ndarray
    tau_hat: float | None
    var_tau_hat: float | None
    reml_loglik: float
    converged: bool
    boundary: bool
    degenerate: bool
    spec: ModelSpec

    @property
    def variance(self) -> VarianceComponents:
        return VarianceComponents(self.sigma_c_sq, self.sigma_e_sq)

    @property
    def information(self) -> float | None:
        return None if self.var_tau_hat is None else 1.0 / self.var_tau_hat


def _single(cells: CellSummaries, spec: ModelSpec):
    D, cols = observed_design(cells.X, cells.periods, spec)
    counts, means, ss = cells.observed()
    return D, cols, counts[None], means[None], np.array([ss.sum()])


def reml_criterion(cells: CellSummaries, vc: VarianceComponents, spec: ModelSpec = FULL_MODEL) -> float:
    """REML log-likelihood of the individual-level model at ``vc``.

    Uses the convention
    ``-1/2 [(N-p) log 2pi + log|Sigma| + log|D' Sigma^-1 D| + r' Sigma^-1 r]``.
    """
    D, _, counts, means, ss = _single(cells, spec)
    st = _stats(counts, means, ss, D)
    ll, _ = _loglik_at(st, np.array([vc.sigma_c_sq]), np.array([vc.sigma_e_sq]))
    return float(ll[0])


def reml_gradient(cells: CellSummaries, vc: VarianceComponents, spec: ModelSpec = FULL_MODEL) -> np.ndarray:
    """Gradient of :func:`reml_criterion` with respect to (sigma_c^2, sigma_e^2)."""
    D, _, counts, means, ss = _single(cells, spec)
    st = _stats(counts, means, ss, D)
    return _gradient_at(st, np.array([vc.sigma_c_sq]), np.array([vc.sigma_e_sq]))[0]


def _embed(T: int, cols: Sequence[int], beta: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    full_b = np.full(T + 1, np.nan)
    full_b[list(cols)] = beta
    full_c = np.full((T + 1, T + 1), np.nan)
    full_c[np.ix_(cols, cols)] = cov
    return full_b, full_c


def gls_fixed_effects(
    cells: CellSummaries, vc: VarianceComponents, spec: ModelSpec = FULL_MODEL
) -> tuple[np.ndarray, np.ndarray]:
    """GLS estimate of beta and its covariance at known variances.

    Both are returned in full (T + 1) beta order, NaN where a coefficient is
    not part of ``spec``.
    """
    D, cols, counts, means, ss = _single(cells, spec)
    st = _stats(counts, means, ss, D)
    gamma = vc.sigma_c_sq / vc.sigma_e_sq
    r = _solve_at(st, np.array([gamma / (1.0 + gamma)]))
    beta = r["beta"][0].copy()
    beta[0] += st.grand[0]
    cov = np.linalg.inv(r["B"][0]) * vc.sigma_e_sq
    return _embed(cells.X.T, cols, beta, cov)


def reml_fit(cells: CellSummaries, spec: ModelSpec = FULL_MODEL) -> FitResult:
    """Fit variance components by REML and return GLS fixed effects."""
    D, cols, counts, means, ss = _single(cells, spec)
    fit = fit_batch(counts, means, ss, D)
    beta, cov = _embed(cells.X.T, cols, fit.beta[0], fit.cov_scaled[0])
    T = cells.X.T
    has_tau = spec.include_treatment_effect
    return FitResult(
        sigma_c_sq=float(fit.sigma_c_sq[0]),
        sigma_e_sq=float(fit.sigma_e_sq[0]),
        beta_hat=beta,
        tau_hat=float(beta[T]) if has_tau else None,
        var_tau_hat=float(cov[T, T]) if has_tau else None,
        reml_loglik=float(fit.loglik[0]),
        converged=bool(fit.converged[0]),
        boundary=bool(fit.boundary[0]),
        degenerate=bool(fit.degenerate[0]),
        spec=spec,
    )


def interim_columns(X: AllocationMatrix, t: int) -> tuple[ModelSpec, np.ndarray, list[int]]:
    """Interim model, its design rows over periods 1..t, and fitted columns."""
    spec = select_interim_model(restrict(X, t), t)
    D, cols = observed_design(X, tuple(range(1, t + 1)), spec)
    return spec, D, cols
