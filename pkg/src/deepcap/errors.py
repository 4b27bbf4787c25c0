"""Exception types raised across the engine."""


class DeepCapError(Exception):
    pass


class DimensionError(DeepCapError, ValueError):
    pass


class NumericError(DeepCapError, ArithmeticError):
    pass


class ConfigError(DeepCapError, ValueError):
    pass


class ParameterError(DeepCapError, ValueError):
    pass


class CheckpointError(DeepCapError):
    pass


class DataError(DeepCapError):
    pass


class UndefinedDistanceError(DeepCapError, ValueError):
    pass


class DivergenceError(NumericError):
    pass
