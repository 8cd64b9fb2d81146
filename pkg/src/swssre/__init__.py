"""Sample size re-estimation for cross-sectional stepped-wedge cluster randomized trials."""

from swssre.design import (
    AllocationMatrix,
    ClusterCovariance,
    DesignMatrix,
    VarianceComponents,
    build_standard_allocation,
    design_matrix,
    restrict,
    tds1_allocation,
    tds2_allocation,
)
from swssre.distributions import (
    RngStream,
    sample_normal,
    shifted_t_tail,
    t_cdf,
    t_quantile,
)
from swssre.estimators import HusseyHughesREML, SampleSizeReestimator
from swssre.mixed_model import (
    CellSummaries,
    FitResult,
    IdentificationError,
    ModelSpec,
    gls_fixed_effects,
    reml_criterion,
    reml_fit,
    select_interim_model,
    summarize,
)
from swssre.power import (
    SplitDesign,
    TestSpec,
    clamp_n,
    critical_value,
    dof_fixed,
    dof_split,
    information_split,
    power_split,
    required_n_fixed,
    required_n_reest,
)
from swssre.simulation import (
    ErrResult,
    ReplicateOutcome,
    ScenarioSpec,
    draw_period_effects,
    estimate_err,
    simulate_segment,
    simulate_trial,
)
from swssre.ssre import (
    InterimEstimate,
    SsreDecision,
    blinded_estimate,
    interim_reestimate,
    one_sample_variance_stats,
    unblinded_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationMatrix",
    "CellSummaries",
    "ClusterCovariance",
    "DesignMatrix",
    "ErrResult",
    "FitResult",
    "HusseyHughesREML",
    "IdentificationError",
    "InterimEstimate",
    "ModelSpec",
    "ReplicateOutcome",
    "RngStream",
    "SampleSizeReestimator",
    "ScenarioSpec",
    "SplitDesign",
    "SsreDecision",
    "TestSpec",
    "VarianceComponents",
    "blinded_estimate",
    "build_standard_allocation",
    "clamp_n",
    "critical_value",
    "design_matrix",
    "dof_fixed",
    "dof_split",
    "draw_period_effects",
    "estimate_err",
    "gls_fixed_effects",
    "information_split",
    "interim_reestimate",
    "one_sample_variance_stats",
    "power_split",
    "reml_criterion",
    "reml_fit",
    "required_n_fixed",
    "required_n_reest",
    "restrict",
    "sample_normal",
    "select_interim_model",
    "shifted_t_tail",
    "simulate_segment",
    "simulate_trial",
    "summarize",
    "t_cdf",
    "t_quantile",
    "tds1_allocation",
    "tds2_allocation",
    "unblinded_estimate",
]
