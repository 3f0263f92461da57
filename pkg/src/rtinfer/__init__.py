"""Reproduction-number inference from sparse, partially observed test counts.

A stochastic branching model of daily infections, three observation
designs (uniform undersampling, cross-sectional, longitudinal cohorts),
and a stochastic variational estimator of the posterior over the daily
reproduction number under a Gaussian-process prior, plus a classical
sliding-window conjugate baseline and a benchmark/calibration harness.
"""

from .cori import CoriConfig, CoriPosterior, cori_posterior, suggested_delay_shift
from .disease import (
    DiseaseConfig,
    InfectiousnessProfile,
    RtTrajectory,
    compute_phi,
    grad_log_density,
    infection_days,
    log_density,
    simulate,
)
from .engine import (
    InferenceProblem,
    PosteriorSummary,
    SviConfig,
    estimate_elbo,
    estimate_gradient,
    fit,
    write_posterior_csv,
)
from .errors import ConfigurationError, NonFiniteGradientError
from .observation import (
    CrossSectional,
    Longitudinal,
    UniformUndersampling,
    estimate_log_likelihood,
    loglik_cross_sectional,
    loglik_longitudinal,
    loglik_uniform,
    longitudinal_trace,
    sample_observations,
)
from .prior import (
    GpKernelConfig,
    PriorConfig,
    VariationalState,
    entropy,
    gaussian_block_kl,
    grad_prior_terms,
    initial_state,
    prior_cross_entropy,
    sample_q,
)
from .scenarios import (
    BenchmarkCell,
    BenchmarkConfig,
    OutbreakScenario,
    RandomTrendScenario,
    calibration_curve,
    generate_scenario,
    mae,
    run_benchmark,
)
from .testing import (
    ConversionBatch,
    ConversionRecord,
    TestProfile,
    builtin_profile,
    sample_conversion,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkCell",
    "BenchmarkConfig",
    "ConfigurationError",
    "ConversionBatch",
    "ConversionRecord",
    "CoriConfig",
    "CoriPosterior",
    "CrossSectional",
    "DiseaseConfig",
    "GpKernelConfig",
    "InfectiousnessProfile",
    "InferenceProblem",
    "Longitudinal",
    "NonFiniteGradientError",
    "OutbreakScenario",
    "PosteriorSummary",
    "PriorConfig",
    "RandomTrendScenario",
    "RtTrajectory",
    "SviConfig",
    "TestProfile",
    "UniformUndersampling",
    "VariationalState",
    "builtin_profile",
    "calibration_curve",
    "compute_phi",
    "cori_posterior",
    "entropy",
    "estimate_elbo",
    "estimate_gradient",
    "estimate_log_likelihood",
    "fit",
    "gaussian_block_kl",
    "generate_scenario",
    "grad_log_density",
    "grad_prior_terms",
    "infection_days",
    "initial_state",
    "log_density",
    "loglik_cross_sectional",
    "loglik_longitudinal",
    "loglik_uniform",
    "longitudinal_trace",
    "mae",
    "prior_cross_entropy",
    "run_benchmark",
    "sample_conversion",
    "sample_observations",
    "sample_q",
    "simulate",
    "suggested_delay_shift",
    "write_posterior_csv",
]
