"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class SpanforgeError(Exception):
    exit_code = 1


class ConfigError(SpanforgeError, ValueError):
    exit_code = 2


class DimensionError(SpanforgeError, ValueError):
    exit_code = 2


class NumericError(SpanforgeError, ArithmeticError):
    pass


class ContractError(SpanforgeError, RuntimeError):
    pass


class InputError(SpanforgeError, ValueError):
    exit_code = 3


class DataValidationError(InputError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])


class IntegrityError(SpanforgeError):
    exit_code = 4
