"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, ConvergenceError -> 4.
"""

from __future__ import annotations


class AuglikError(Exception):
    """Base class for all package errors."""


class ConfigError(AuglikError):
    """Bad or missing configuration (unknown keys, absent required fields)."""


class DataError(AuglikError):
    """Structurally invalid input data (bad CSV, misaligned sequences)."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DesignError(DataError):
    """Survey design unusable for variance estimation (e.g. singleton stratum)."""


class DegenerateLikelihoodError(AuglikError):
    """A subject's likelihood is identically zero for every parameter value.

    Happens only when Se or Sp equals 1 exactly and the observed reports
    contradict the gold-standard status.
    """

    def __init__(self, subject_id):
        super().__init__(
            f"subject {subject_id!r}: likelihood is zero for all parameters "
            "(reports contradict the gold standard under the given Se/Sp)"
        )
        self.subject_id = subject_id


class ConvergenceError(AuglikError):
    """Raised by the CLI when a fit did not converge."""
