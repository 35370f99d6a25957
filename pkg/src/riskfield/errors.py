"""Exception types shared across the package."""

import numpy as np


class ConfigurationError(ValueError):
    """Invalid parameters or configuration values."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class ParseError(ValueError):
    """Malformed input file; carries the offending row number when known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DisconnectedGraphError(ValueError):
    """Adjacency graph has more than one connected component."""

    def __init__(self, components):
        self.components = [sorted(int(i) for i in c) for c in components]
        sizes = ", ".join(str(len(c)) for c in self.components)
        super().__init__(
            f"adjacency graph has {len(self.components)} components (sizes {sizes})"
        )


class SingularMatrixError(np.linalg.LinAlgError):
    """Non-positive pivot during Cholesky factorization."""


class FitError(RuntimeError):
    """Inner optimisation failed at a given hyperparameter value."""

    def __init__(self, message, theta=None):
        if theta is not None:
            message = f"{message} (theta={np.round(np.asarray(theta), 6).tolist()})"
        super().__init__(message)
        self.theta = theta
