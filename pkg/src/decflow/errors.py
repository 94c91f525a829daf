"""Exception types shared across the package."""


class DecflowError(Exception):
    """Base class for package errors."""


class ValidationError(DecflowError, ValueError):
    """Invalid user input: bad shapes, bad configuration, malformed files."""


class NumericalError(DecflowError, ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(NumericalError):
    """Training loss became non-finite.

    Carries the last finite parameters so callers can checkpoint them.
    """

    def __init__(self, message, last_params=None, step=None):
        super().__init__(message)
        self.last_params = last_params
        self.step = step


class UnsupportedDesignError(DecflowError):
    """A check or operation is not defined for the requested design."""
