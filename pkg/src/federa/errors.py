"""Exception hierarchy shared across the package.

The CLI maps each family onto a process exit code.
"""


class FederaError(Exception):
    exit_code = 1


class ConfigError(FederaError, ValueError):
    exit_code = 2


class DataError(FederaError, ValueError):
    exit_code = 3


class NumericError(FederaError, ArithmeticError):
    exit_code = 4


class SvdConvergenceError(NumericError):
    pass


class UnsupportedOperation(FederaError, RuntimeError):
    exit_code = 2
