"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, unreadable or
malformed data exits 2, numeric failures during training exit 3.
"""


class UsageError(ValueError):
    """Bad arguments, bad config values, or misshapen tensors."""


class DataError(ValueError):
    """Malformed or inconsistent files on disk."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required."""
