"""
Exception types raised by the data weighter.
"""
from typing import Optional


class DataWeighterError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DataWeighterError, ValueError):
    """Invalid or infeasible experiment configuration."""


class ContractError(DataWeighterError, ValueError):
    """A caller broke a function's precondition (shapes, layouts, indices)."""


class DomainError(DataWeighterError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class FormatError(DataWeighterError, ValueError):
    """A data file does not follow the expected binary layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConvergenceError(DataWeighterError, ArithmeticError):
    """An iterative numerical routine did not converge."""
