"""Exception hierarchy. CLI exit codes hang off these classes."""


class LoadiffError(Exception):
    exit_code = 1


class ShapeError(LoadiffError, ValueError):
    pass


class ConfigError(LoadiffError, ValueError):
    exit_code = 2


class DataError(LoadiffError, ValueError):
    exit_code = 3


class NumericError(LoadiffError, ArithmeticError):
    exit_code = 4


class CheckpointError(LoadiffError, ValueError):
    exit_code = 3
