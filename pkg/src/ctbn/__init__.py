"""Continuous-time Bayesian networks: variational inference and structure learning."""

from .model import (
    GammaPrior,
    Graph,
    NetworkModel,
    StateSpace,
    amalgamate,
    glauber_cim,
    validate_model,
)

__all__ = [
    "StateSpace",
    "Graph",
    "NetworkModel",
    "GammaPrior",
    "glauber_cim",
    "amalgamate",
    "validate_model",
]
