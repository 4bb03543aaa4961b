"""Exception types shared across the package.

The CLI maps InputError to exit code 1 and NumericalError to exit code 2;
everything else is a bug.
"""


class InputError(ValueError):
    """Malformed or inconsistent caller input (shapes, bounds, file contents)."""


class NumericalError(RuntimeError):
    """Non-finite values or divergence detected during a solve."""
