"""Exception types shared across the package.

Every error carries the process exit code the CLI maps it to:
1 usage/configuration, 2 data, 3 numeric.
"""


class MVCLError(Exception):
    exit_code = 2


class UsageError(MVCLError, ValueError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(MVCLError, ValueError):
    exit_code = 2


class InvalidWindowError(DataError):
    pass


class OutOfBoundsError(DataError):
    pass


class InvalidAnnotationError(DataError):
    pass


class InvalidRatingError(DataError):
    pass


class InsufficientViewsError(DataError):
    pass


class MissingDataError(DataError):
    pass


class StratificationError(DataError):
    pass


class EmptyDataError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ShapeError(DataError):
    pass


class NumericError(MVCLError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class NoNegativesError(NumericError):
    pass


class UndefinedMetricError(NumericError):
    pass


class FrozenViolationError(MVCLError, RuntimeError):
    exit_code = 3
