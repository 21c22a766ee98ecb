"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ValidationError`` -> 2,
``NumericalError`` -> 3.
"""


class ValidationError(ValueError):
    """Bad shapes, out-of-range arguments, malformed files."""


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required (e.g. a diverged loss)."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
