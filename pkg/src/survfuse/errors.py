"""Exception types shared across the package, mapped to CLI exit codes."""


class SurvfuseError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(SurvfuseError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(SurvfuseError):
    """Invalid cohort data, files, or shapes."""

    exit_code = 3


class NumericalError(SurvfuseError):
    """Numerical failure: non-finite values, degenerate inputs, non-convergence."""

    exit_code = 4
