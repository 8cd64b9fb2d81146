"""scikit-learn style wrappers around the functional core.

Observations are passed as a 2-D array whose columns are the 0-based
cluster index and the 1-based period, optionally followed by the 0/1
treatment indicator; ``y`` holds the outcomes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from swssre.design import AllocationMatrix, restrict
from swssre.mixed_model import ModelSpec, reml_fit, summarize
from swssre.power import TestSpec
from swssre.ssre import BLINDED, UNBLINDED, blinded_estimate, decide_n, unblinded_estimate


def _integer_column(col: np.ndarray, name: str) -> np.ndarray:
    out = col.astype(int)
    if np.any(out != col):
        raise ValueError(f"{name} labels must be integers")
    return out


def check_observations(X, y=None, n_columns: tuple[int, ...] = (2, 3)):
    """Validate an observation array; returns (cluster, period, treatment|None, y)."""
    if y is None:
        X = check_array(X, dtype=float)
    else:
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if X.shape[1] not in n_columns:
        raise ValueError(f"expected {' or '.join(map(str, n_columns))} columns, got {X.shape[1]}")
    cluster = _integer_column(X[:, 0], "cluster")
    period = _integer_column(X[:, 1], "period")
    if cluster.min() < 0:
        raise ValueError("cluster indices are 0-based")
    if period.min() < 1:
        raise ValueError("periods are 1-based")
    treat = None
    if X.shape[1] == 3:
        treat = X[:, 2]
        if not np.isin(treat, (0.0, 1.0)).all():
            raise ValueError("treatment indicator must be 0 or 1")
    return cluster, period, treat, y


def allocation_from_observations(cluster, period, treat) -> AllocationMatrix:
    """Recover the allocation matrix; every cell must be observed."""
    C, T = int(cluster.max()) + 1, int(period.max())
    cell = cluster * T + (period - 1)
    seen = np.bincount(cell, minlength=C * T)
    if np.any(seen == 0):
        i, j = divmod(int(np.flatnonzero(seen == 0)[0]), T)
        raise ValueError(f"cluster {i} has no observations in period {j + 1}")
    ones = np.bincount(cell, weights=treat, minlength=C * T)
    if np.any((ones != 0) & (ones != seen)):
        raise ValueError("treatment must be constant within each cluster-period cell")
    return AllocationMatrix((ones > 0).astype(float).reshape(C, T), rollout=False)


class HusseyHughesREML(RegressorMixin, BaseEstimator):
    """Cross-sectional stepped-wedge mixed model fitted by REML.

    ``X`` has columns (cluster, period, treatment). After fitting,
    ``coef_`` is (mu, pi_2..pi_T, tau) with NaN for omitted terms and
    ``predict`` returns the marginal mean of each row.
    """

    def __init__(self, include_period_effects: bool = True, include_treatment_effect: bool = True):
        self.include_period_effects = include_period_effects
        self.include_treatment_effect = include_treatment_effect

    def fit(self, X, y):
        cluster, period, treat, y = check_observations(X, y, n_columns=(3,))
        self.allocation_ = allocation_from_observations(cluster, period, treat)
        cells = summarize(np.column_stack([cluster, period, y]), self.allocation_)
        spec = ModelSpec(self.include_period_effects, self.include_treatment_effect)
        self.fit_result_ = reml_fit(cells, spec)
        self.coef_ = self.fit_result_.beta_hat
        self.sigma_c_sq_ = self.fit_result_.sigma_c_sq
        self.sigma_e_sq_ = self.fit_result_.sigma_e_sq
        self.tau_ = self.fit_result_.tau_hat
        self.var_tau_ = self.fit_result_.var_tau_hat
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        _, period, treat, _ = check_observations(X, n_columns=(3,))
        if period.max() > self.allocation_.T:
            raise ValueError("period outside the fitted design")
        coef = np.nan_to_num(self.coef_, nan=0.0)
        pi = np.concatenate([[0.0], coef[1:-1]])
        return coef[0] + pi[period - 1] + coef[-1] * treat


class SampleSizeReestimator(BaseEstimator):
    """Interim re-estimation of the post-interim sample size.

    ``fit`` takes interim observations with columns (cluster, period);
    treatment is read from ``allocation``, and the blinded method never
    looks at it beyond the count of treated cells.
    """

    def __init__(
        self,
        allocation=None,
        t: int = 1,
        n_init: int = 1,
        alpha: float = 0.05,
        beta: float = 0.1,
        delta: float = 1.0,
        method: str = BLINDED,
        n_min: int = 1,
        n_max: int = 1000,
        tau_star: float = 0.0,
    ):
        self.allocation = allocation
        self.t = t
        self.n_init = n_init
        self.alpha = alpha
        self.beta = beta
        self.delta = delta
        self.method = method
        self.n_min = n_min
        self.n_max = n_max
        self.tau_star = tau_star

    def _allocation(self) -> AllocationMatrix:
        if self.allocation is None:
            raise ValueError("allocation is required")
        if isinstance(self.allocation, AllocationMatrix):
            return self.allocation
        return AllocationMatrix(np.asarray(self.allocation, dtype=float))

    def fit(self, X, y):
        if self.method not in (BLINDED, UNBLINDED):
            raise ValueError(f"method must be {BLINDED!r} or {UNBLINDED!r}")
        A = self._allocation()
        if not 1 <= self.t <= A.T - 1:
            raise ValueError(f"t must lie in [1, {A.T - 1}]")
        cluster, period, _, y = check_observations(X, y, n_columns=(2,))
        if period.max() > self.t:
            raise ValueError(f"interim data may only cover periods 1..{self.t}")
        cells = summarize(np.column_stack([cluster, period, y]), A, range(1, self.t + 1))
        X_t = restrict(A, self.t)
        if self.method == BLINDED:
            est = blinded_estimate(cells, X_t, self.n_init, self.tau_star)
        else:
            est = unblinded_estimate(cells, X_t, self.t)
        test = TestSpec(self.alpha, self.beta, self.delta)
        self.decision_ = decide_n(est, A, self.t, self.n_init, test, self.n_min, self.n_max)
        self.estimate_ = est
        self.sigma_c_sq_ = est.sigma_c_sq_hat
        self.sigma_e_sq_ = est.sigma_e_sq_hat
        self.n_reest_ = self.decision_.n_reest
        self.n_final_ = self.decision_.n_final
        self.n_features_in_ = 2
        return self


__all__ = [
    "HusseyHughesREML",
    "SampleSizeReestimator",
    "allocation_from_observations",
    "check_observations",
]
