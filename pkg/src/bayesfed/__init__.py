"""Federated learning simulator for variational Bayesian MLPs."""

__version__ = "0.1.0"

from bayesfed.gaussian import (  # noqa: E402
    AggregationMethod,
    AggregationWeights,
    GaussianParams,
    aggregate,
    aggregate_aalv,
    aggregate_cf,
    aggregate_eaa,
    aggregate_gaa,
    aggregate_point,
    aggregate_ppa,
)

__all__ = [
    "AggregationMethod",
    "AggregationWeights",
    "GaussianParams",
    "aggregate",
    "aggregate_aalv",
    "aggregate_cf",
    "aggregate_eaa",
    "aggregate_gaa",
    "aggregate_point",
    "aggregate_ppa",
]
