"""Multi-stage online learning simulator."""

from ._core import (
    ConfigError,
    NumericalError,
    Topology,
    bernoulli_ladder,
    chain_tree,
    default_params,
    eexp3_estimate,
    fit_loglog_slope,
    mixture_distribution,
    parse_adjacency,
    run_bernoulli,
    run_experiment,
    scenarios,
    uniform_tree,
    validate,
)

__all__ = [
    "ConfigError",
    "NumericalError",
    "Topology",
    "bernoulli_ladder",
    "chain_tree",
    "default_params",
    "eexp3_estimate",
    "fit_loglog_slope",
    "mixture_distribution",
    "parse_adjacency",
    "run_bernoulli",
    "run_experiment",
    "scenarios",
    "uniform_tree",
    "validate",
]
