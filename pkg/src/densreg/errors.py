"""Exception types; the CLI maps each family to its own exit code."""


class DensRegError(Exception):
    exit_code = 1


class ConfigError(DensRegError, ValueError):
    exit_code = 2


class DataError(DensRegError, ValueError):
    exit_code = 3


class NumericError(DensRegError, FloatingPointError):
    exit_code = 4
