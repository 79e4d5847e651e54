"""Experiment runner for approximation-rate and consistency checks."""

from .experiments import (
    EXPERIMENTS,
    Check,
    ExperimentConfig,
    RateReport,
    fit_slope,
    gradient_check,
    run_approx_rate,
    run_consistency,
    run_em_diagnostics,
    run_experiment,
    run_gates_check,
    run_kl_rate,
    uniform_gate_error,
)
from .report import metrics_csv, results_csv, write_outputs

__all__ = [
    "EXPERIMENTS",
    "Check",
    "ExperimentConfig",
    "RateReport",
    "fit_slope",
    "gradient_check",
    "metrics_csv",
    "results_csv",
    "run_approx_rate",
    "run_consistency",
    "run_em_diagnostics",
    "run_experiment",
    "run_gates_check",
    "run_kl_rate",
    "uniform_gate_error",
    "write_outputs",
]
