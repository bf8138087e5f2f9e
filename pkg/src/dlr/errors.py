"""Exception hierarchy; the CLI maps each family to its own exit code."""


class DLRError(Exception):
    exit_code = 1


class ConfigError(DLRError, ValueError):
    exit_code = 2


class DataError(DLRError, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class NumericError(DLRError, ArithmeticError):
    exit_code = 4
