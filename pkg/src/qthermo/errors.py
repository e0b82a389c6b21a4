"""Exception types raised across the package."""


class QThermoError(Exception):
    """Base class for all package errors."""


class ZeroNormError(QThermoError, ValueError):
    """A state with (numerically) zero norm cannot be renormalized."""


class DimMismatchError(QThermoError, ValueError):
    pass


class InvalidDensityError(QThermoError, ValueError):
    pass


class NotHermitianError(QThermoError, ValueError):
    pass


class TimestepTooLargeError(QThermoError, ValueError):
    """The timestep leaves the weak-measurement regime."""


class ChannelNotSingleTransitionError(QThermoError, ValueError):
    """The classical/quantum heat split needs a channel of the form |j><i|."""


class MissingTemperatureError(QThermoError, ValueError):
    pass


class NonCommutingInvariantStateError(QThermoError, ValueError):
    pass


class AllDivergentError(QThermoError, ValueError):
    pass


class ProtocolShapeError(QThermoError, ValueError):
    pass


class TreeTooLargeError(QThermoError, RuntimeError):
    pass


class EmptyInputError(QThermoError, ValueError):
    pass


class TrajectoryError(QThermoError, RuntimeError):
    """Wraps an error raised while propagating a given trajectory."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"trajectory {index}: {cause}")
        self.index = index
        self.cause = cause


class ConfigParseError(QThermoError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class ConfigValidationError(QThermoError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class SchemaVersionMismatchError(QThermoError, ValueError):
    pass


class RecordFormatError(QThermoError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
