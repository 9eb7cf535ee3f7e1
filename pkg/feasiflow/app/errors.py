"""
Error hierarchy and exit-code table.

Every library failure raises a FeasiflowError subclass that carries an ErrorCategory;
the CLI maps the category to its exit code through EXIT_CODES.
"""

from enum import Enum
from typing import Any, Dict, Optional


class ErrorCategory(str, Enum):
    USAGE = "usage"
    DATA = "data"
    NUMERIC = "numeric"


EXIT_SUCCESS = 0

EXIT_CODES: Dict[ErrorCategory, int] = {
    ErrorCategory.USAGE: 2,
    ErrorCategory.DATA: 3,
    ErrorCategory.NUMERIC: 4,
}


class FeasiflowError(Exception):
    """Base error. `context` holds structured diagnostics (line, sample id, layer, ...)."""

    category: ErrorCategory = ErrorCategory.NUMERIC

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = {k: v for k, v in context.items() if v is not None}

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]

    def one_line(self) -> str:
        text = str(self).replace("\n", " ").replace('"', "'")
        return f'error category={self.category.value} type={type(self).__name__} message="{text}"'


# ============================================================================
# USAGE
# ============================================================================

class UsageError(FeasiflowError):
    category = ErrorCategory.USAGE


class ConfigError(UsageError):
    pass


class TapeError(UsageError):
    """net_backward called with a missing tape or one taken before a parameter update."""


# ============================================================================
# DATA
# ============================================================================

class DataError(FeasiflowError):
    category = ErrorCategory.DATA


class ShapeError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        super().__init__(message, line=line, path=path)


class SplitError(DataError):
    pass


class ThresholdError(DataError):
    pass


class MetricError(DataError):
    pass


class SimilarityError(DataError):
    pass


class CheckpointError(DataError):
    pass


# ============================================================================
# NUMERIC
# ============================================================================

class NumericError(FeasiflowError):
    category = ErrorCategory.NUMERIC


class DomainError(NumericError):
    pass


class DensityError(NumericError):
    pass


class TrainingError(NumericError):
    pass


class BaseStateError(NumericError):
    pass


class SolverError(NumericError):
    pass
