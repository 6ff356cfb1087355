"""Correlation information bottleneck: estimators, metrics and the synthetic benchmark."""

from ._cib import (
    ConfigError,
    canonical_config,
    config_hash,
    consensus_score,
    default_beta_grid,
    discrete_mi_oracle,
    flips,
    gaussian_mi_oracle,
    generate_split,
    run_experiment,
    upper_bound_estimate,
    verify_bound_ordering,
)

__all__ = [
    "ConfigError",
    "canonical_config",
    "config_hash",
    "consensus_score",
    "default_beta_grid",
    "discrete_mi_oracle",
    "flips",
    "gaussian_mi_oracle",
    "generate_split",
    "run_experiment",
    "upper_bound_estimate",
    "verify_bound_ordering",
]
