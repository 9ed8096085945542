"""Networked GRNN controllers: graphs, distributed training, stability certificates."""

from ._core import (
    Config,
    LocalityViolation,
    NodeWeights,
    NumericalFailure,
    Setup,
    Topology,
    certify,
    compare_lqr,
    evaluate,
    generate,
    metropolis_hastings_weights,
    network_forward,
    random_partition_graph,
    scaling,
    shift_operator,
    train,
)

__all__ = [
    "Config",
    "LocalityViolation",
    "NodeWeights",
    "NumericalFailure",
    "Setup",
    "Topology",
    "certify",
    "compare_lqr",
    "evaluate",
    "generate",
    "metropolis_hastings_weights",
    "network_forward",
    "random_partition_graph",
    "scaling",
    "shift_operator",
    "train",
]
