"""Exception types shared across the package.

The CLI maps these onto exit codes, so every module raises one of them
instead of bare ``ValueError``/``RuntimeError``.
"""


class PtMomentsError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PtMomentsError, ValueError):
    pass


class ResourceLimitError(PtMomentsError, MemoryError):
    """Requested dense object exceeds the configured size cap."""


class InsufficientDataError(PtMomentsError, ValueError):
    """Too few snapshots for the requested U-statistic order."""


class UnsupportedOrderError(PtMomentsError, ValueError):
    pass


class UndefinedRatioError(PtMomentsError, ValueError):
    """R3 requested for non-positive moments."""


class DatasetFormatError(PtMomentsError, ValueError):
    """Malformed dataset file. ``lineno`` is 1-based (0 when not line-specific)."""

    def __init__(self, message, lineno=0):
        if lineno:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ValidationError(PtMomentsError, ValueError):
    pass


class ConfigError(PtMomentsError, ValueError):
    pass
