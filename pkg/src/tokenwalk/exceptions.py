"""Error types raised across the package."""

from __future__ import annotations


class TokenWalkError(Exception):
    """Base class for all package errors."""


class ParameterError(TokenWalkError, ValueError):
    """Invalid algorithm or model parameter."""


class GraphError(TokenWalkError, ValueError):
    """Malformed or disconnected communication graph."""


class MixingError(TokenWalkError):
    """Random walk has no usable spectral gap."""


class ConvergenceError(TokenWalkError):
    """An iterative solver hit its iteration cap."""


class NumericalError(TokenWalkError):
    """A numerical subroutine failed; carries the final residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DataError(TokenWalkError, ValueError):
    """Unparseable or insufficient input data."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(TokenWalkError, ValueError):
    """Inconsistent experiment configuration."""


class DomainError(TokenWalkError, ValueError):
    """Argument outside the domain of a convex function."""
