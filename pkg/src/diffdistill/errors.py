"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ValidationError
exits 2, NumericalError exits 3.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition (shape, range, config)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or diverged."""
