"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data errors
exit 2, numerical failures exit 3.
"""


class SecrError(Exception):
    """Base class for package-specific errors."""


class UsageError(SecrError):
    """Bad invocation: unknown option, malformed config, invalid combination."""


class DataError(SecrError):
    """Input data is missing, malformed, or inconsistent with its manifest."""


class NumericalError(SecrError):
    """A numerical procedure failed (singular fit, estimator with no finite terms)."""
