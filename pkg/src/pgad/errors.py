"""Exception classes shared across the package.

The CLI maps these onto its documented exit codes, so every user-facing
failure should be raised as one of them.
"""


class PgadError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(PgadError):
    """Invalid configuration: bad flag combinations, unusable settings."""

    exit_code = 1


class DataError(PgadError):
    """Unusable input data: missing files, malformed CSV, bad shapes."""

    exit_code = 2


class DivergenceError(PgadError):
    """Numeric failure during training (non-finite loss or gradients)."""

    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
