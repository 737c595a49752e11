"""Toolkit error hierarchy.

Each error class maps to a CLI exit code so the command-line surface can
report failures with a machine-parsable ``E:<code>:`` prefix.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class UsageError(ToolkitError):
    """Bad invocation: unknown subcommand, missing/invalid arguments."""

    exit_code = 1


class DataError(ToolkitError):
    """Malformed or inconsistent input data (files, shapes, ranges)."""

    exit_code = 2


class ParameterDomainError(DataError):
    """Physical or numerical parameter outside its valid domain."""


class EmptyCorrespondenceError(DataError):
    """No matched keypoint pairs; the matching loss is undefined."""


class NumericalError(ToolkitError):
    """Numerical failure: degenerate geometry, failed gradient check."""

    exit_code = 3
