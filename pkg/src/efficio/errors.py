"""Exception hierarchy. Each class maps onto a CLI exit code."""


class EfficioError(Exception):
    exit_code = 1


class ConfigError(EfficioError, ValueError):
    """Invalid hyperparameter or configuration field."""

    exit_code = 1


class UsageError(EfficioError, ValueError):
    exit_code = 1


class DimensionError(EfficioError, ValueError):
    exit_code = 1


class DataError(EfficioError, ValueError):
    """Token ids out of range, sequences too long, corpora too short."""

    exit_code = 2


class FormatError(EfficioError, ValueError):
    """Malformed or incompatible checkpoint file."""

    exit_code = 2


class NumericalAbort(EfficioError, ArithmeticError):
    """Raised when a loss or tensor becomes NaN/Inf."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
