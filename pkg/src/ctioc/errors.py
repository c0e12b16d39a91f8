"""Exception hierarchy shared by all modules."""


class IOCError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(IOCError):
    def __init__(self, message, line=None, column=None, symbol=None):
        super().__init__(message)
        self.line = line
        self.column = column
        self.symbol = symbol


class BasisError(IOCError):
    pass


class BasisParseError(ConfigError, BasisError):
    pass


class NumericalError(IOCError):
    """Any failure of a numerical stage; the CLI maps these to exit code 3."""


class DivergenceError(NumericalError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class NotStabilizableError(NumericalError):
    pass


class InsufficientExcitationError(NumericalError):
    pass


class NotInformativeError(InsufficientExcitationError):
    pass


class ConditioningError(NumericalError):
    pass


class PositivityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class DataError(NumericalError):
    """Recorded data unusable (too short, below the amplitude floor, ...)."""
