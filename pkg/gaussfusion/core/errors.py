"""Exception hierarchy shared by every gaussfusion module."""
from typing import Optional


class GaussFusionError(Exception):
    """Base class for all errors raised by gaussfusion."""


class DimensionError(GaussFusionError, ValueError):
    """Operand shapes do not agree."""


class ContractError(GaussFusionError, ValueError):
    """A documented pre-condition of an operation was violated."""


class NumericError(GaussFusionError, ArithmeticError):
    """An operation produced NaN or Inf values."""


class ConfigError(GaussFusionError, ValueError):
    """Invalid configuration key or value."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DatasetError(GaussFusionError, OSError):
    """A dataset, checkpoint or serialized file is missing or corrupt."""


class GradientCheckError(GaussFusionError, AssertionError):
    """A finite-difference gradient suite reported a failure."""
