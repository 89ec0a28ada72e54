"""Exception types raised across the package."""

from __future__ import annotations


class FedselError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedselError, ValueError):
    """Invalid configuration value."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


class DimensionError(FedselError, ValueError):
    """Array shapes do not agree."""


class ConvergenceError(FedselError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, last_iterate=None, grad_norm: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class NumericalError(FedselError, ArithmeticError):
    """A linear system was singular or produced non-finite values."""


class DegenerateDataError(FedselError, ValueError):
    """Labels or samples carry no information for a fit (e.g. a single class)."""


class InfeasibleCalibrationError(FedselError, ValueError):
    """Target moments are outside the convex hull of the enrolled balance rows."""


class DegenerateConstraintsError(FedselError, ValueError):
    """The calibration constraint matrix is rank deficient."""


class InvariantViolation(FedselError, RuntimeError):
    """A structural invariant of the selection model was broken."""


class StepSizeError(FedselError, ValueError):
    """The effective step size violates the bound required by the floor formula."""


class EnumerationTooLarge(FedselError, ValueError):
    """Exact enumeration requested for more clients than is tractable."""
