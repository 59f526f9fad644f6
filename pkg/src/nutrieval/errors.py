"""Exception hierarchy shared across the harness.

The CLI maps these onto stable exit codes: ConfigError -> 1, DataError -> 2,
BackendError -> 3.
"""

from __future__ import annotations


class HarnessError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HarnessError):
    """Bad configuration or usage."""


class DataError(HarnessError):
    """Input data violates a documented contract."""


class SchemaError(DataError):
    """A CSV cell or row violates the documented file schema.

    Carries enough context (file, 1-based data row, column) to locate the
    offending cell without reopening the file.
    """

    def __init__(self, message: str, *, path: str = "", row: int | None = None,
                 column: str = ""):
        self.path = path
        self.row = row
        self.column = column
        where = path
        if row is not None:
            where += f", row {row}"
        if column:
            where += f", column {column}"
        super().__init__(f"{where}: {message}" if where else message)


class GrammarError(DataError):
    """Text violates the food-string grammar."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class UnknownFoodError(DataError):
    """A descriptor has no row in the nutrient lookup table."""


class PartialRunError(DataError):
    """A run directory holds fewer results than the manifest promised."""


class BackendError(HarnessError):
    """The prediction backend is unusable (unreachable, misconfigured)."""
