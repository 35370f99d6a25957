"""Simulation benchmark for areal (BYM2) and continuous (SPDE log-Gaussian Cox) disease-risk models."""

from .errors import (
    ConfigurationError,
    DisconnectedGraphError,
    DomainError,
    FitError,
    ParseError,
    SingularMatrixError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DisconnectedGraphError",
    "DomainError",
    "FitError",
    "ParseError",
    "SingularMatrixError",
    "__version__",
]
