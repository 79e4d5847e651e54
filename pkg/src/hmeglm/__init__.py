"""Hierarchical mixtures-of-experts for one-parameter exponential-family regression."""

from .expfam import (
    DomainError,
    ExpFamily,
    bernoulli,
    exponential,
    gaussian,
    poisson,
    truncated_exponential,
    truncated_poisson,
)
from .fit import FitConfig, FitResult, em_step, loglik_gradient, mle, select_structure
from .gating import (
    GateParams,
    Partition,
    Structure,
    StructureError,
    check_subgeometric,
    gate_indicator_error,
    gate_vector,
    indicator_gates,
)
from .hme import HMEModel, ModelFormatError, density_recursive, load_model, save_model
from .metrics import kl_divergence, lp_distance, mse_expectation, mse_mean, weighted_l2
from .targets import TargetFunction, make_target, sample_dataset, taylor_hme

__version__ = "0.1.0"
