"""Structured amortized variational smoothing for nonlinear Gaussian state-space models.

Everything runs in double precision; the structured covariance algebra assumes
the arithmetic headroom of float64.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

from varsmooth.errors import (
    CholeskyBreakdownError,
    ConfigError,
    ConsistencyError,
    NumericInputError,
    ShapeError,
)
from varsmooth.lowrank import (
    DiagCov,
    LowRankNatUpdate,
    PosteriorGaussian,
    PredictiveGaussian,
    cov_mvm,
    diag_cov,
    kl_post_pred,
    kl_vs_predictive,
    logdet_ratio,
    posterior_update,
    prec_mvm,
    predictive_from_moments,
    predictive_from_samples,
    sample_posterior,
    trace_term,
)

__version__ = "0.1.0"
