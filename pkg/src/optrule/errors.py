"""Exception types shared across the package."""


class OptruleError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OptruleError, ValueError):
    """Invalid argument, configuration, or data contract violation."""


class CsvParseError(ValidationError):
    """Malformed CSV content. ``row`` is the 1-based data-row index."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConvergenceError(OptruleError):
    """A numerical routine failed to converge."""
