"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2.
Everything else (programming/contract errors) surfaces as the usual
ValueError/RuntimeError and is not given a dedicated exit code.
"""


class PbogateError(Exception):
    """Base class for package-specific errors."""


class ConfigError(PbogateError, ValueError):
    """Invalid experiment configuration or CLI usage."""


class DataError(PbogateError, ValueError):
    """Malformed or inconsistent input data (CSV parse, alignment, coverage)."""
