"""Exception types shared across the package."""


class SpgdError(Exception):
    """Base class for all errors raised by :mod:`spgd`."""


class InvalidInputError(SpgdError, ValueError):
    """An argument violates a documented precondition."""


class InvalidConfigError(SpgdError, ValueError):
    """A hyperparameter combination or config file is not acceptable."""


class NumericalFailure(SpgdError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``theta`` and ``step`` are attached when the failure happened inside an
    optimizer or at a specific parameter vector.
    """

    def __init__(self, message, *, theta=None, step=None):
        super().__init__(message)
        self.theta = theta
        self.step = step
