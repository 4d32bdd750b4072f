"""Exception types shared across the package."""


class MPFAError(Exception):
    """Base class for all package errors."""


class DimensionError(MPFAError, ValueError):
    pass


class NumericError(MPFAError, ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


class ParameterError(MPFAError, ValueError):
    pass


class StateError(MPFAError, RuntimeError):
    pass


class TimeOrderError(MPFAError, ValueError):
    pass


class ParseError(MPFAError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SamplingError(MPFAError, RuntimeError):
    pass


class ConfigurationError(MPFAError, ValueError):
    pass


class ProtocolError(MPFAError, RuntimeError):
    pass


class UndefinedMetricError(MPFAError, ValueError):
    pass


class CheckpointError(MPFAError, ValueError):
    pass
