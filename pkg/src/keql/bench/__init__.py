"""Benchmark datasets, error metrics, experiment pipelines and the CLI."""

from .experiments import ConfigError, SolverFailure, run_experiment, validate_config
from .metrics import r_eql, r_filter, r_opl, relative_sq_error

__all__ = ["ConfigError", "SolverFailure", "run_experiment", "validate_config", "r_eql", "r_filter", "r_opl", "relative_sq_error"]
