class SmoothGaugeError(Exception):
    exit_code = 1


class UsageError(SmoothGaugeError):
    exit_code = 2


class InputError(SmoothGaugeError, ValueError):
    exit_code = 3


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(SmoothGaugeError):
    exit_code = 4


class NumericalError(SmoothGaugeError, ArithmeticError):
    exit_code = 5


class RangeError(NumericalError):
    pass
