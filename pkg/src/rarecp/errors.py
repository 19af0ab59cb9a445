"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, `DataError`
exits 2, `NumericError` exits 3.
"""


class RareCPError(Exception):
    """Base class for all package-specific errors."""


class DataError(RareCPError):
    """Input data violates a contract (file, column, shape, or value)."""


class FileMissingError(DataError):
    pass


class ColumnMissingError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class EmptySeriesError(DataError):
    pass


class ForecastMissingError(DataError):
    """A precomputed forecast was requested for an index it does not cover."""


class NumericError(RareCPError):
    """A numeric invariant failed (non-finite value, degenerate statistic)."""


class NotFittedError(RareCPError):
    """Estimator used before ``fit`` (or before loading a checkpoint)."""
