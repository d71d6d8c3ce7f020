"""Exception hierarchy shared by the library and the CLI."""


class HDGMError(Exception):
    """Base class for all errors raised by :mod:`hdgm`."""

    exit_code = 1
    kind = "error"


class InputError(HDGMError, ValueError):
    """Invalid input data, configuration or schema."""

    exit_code = 2
    kind = "input"


class SchemaError(InputError):
    """Column layout does not match what the fitted model expects."""

    kind = "schema"


class NumericalError(HDGMError, ArithmeticError):
    """A factorization or recursion broke down."""

    exit_code = 3
    kind = "numerical"


class LikelihoodDecreaseError(NumericalError):
    """EM produced a decrease of the observed log-likelihood beyond slack."""

    kind = "likelihood-decrease"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
