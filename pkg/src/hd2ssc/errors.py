"""Exception hierarchy shared by every module.

The CLI maps these onto stable exit codes (1 usage, 2 input/IO, 3 numeric).
"""


class HD2Error(Exception):
    exit_code = 2


class ShapeError(HD2Error, ValueError):
    pass


class NumericDomainError(HD2Error, ValueError):
    exit_code = 3


class ConfigError(HD2Error, ValueError):
    pass


class FormatError(HD2Error, ValueError):
    pass


class LengthError(FormatError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class DataError(HD2Error, ValueError):
    pass


class CheckpointError(HD2Error, ValueError):
    pass


class DivergenceError(HD2Error, ArithmeticError):
    exit_code = 3
