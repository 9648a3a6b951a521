"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 2,
FormatError -> 3, NumericalError -> 4.
"""


class UsageError(ValueError):
    """Bad command-line arguments or an invalid configuration value."""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values and was aborted."""
