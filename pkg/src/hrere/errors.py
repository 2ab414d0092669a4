"""Error classes shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class HrereError(Exception):
    """Base class for all package errors."""


class ConfigError(HrereError):
    """Bad command-line usage or an invalid configuration value."""


class DataError(HrereError):
    """Malformed or inconsistent input data (files, KBs, corpora, datasets)."""


class NumericError(HrereError):
    """Non-finite loss or another numeric failure during a run."""
