"""Exception types shared across the package."""


class TadiffError(Exception):
    """Base class for all package errors."""


class ConfigError(TadiffError, ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(TadiffError, ValueError):
    pass


class VocabularyError(TadiffError, ValueError):
    pass


class ContractError(TadiffError, ValueError):
    pass


class StateError(TadiffError, RuntimeError):
    pass


class FormatError(TadiffError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UndefinedMetricError(TadiffError, ValueError):
    pass


class DataError(TadiffError):
    pass


class NumericAbort(TadiffError, FloatingPointError):
    pass
