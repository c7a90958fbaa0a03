"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MostError(Exception):
    exit_code = 1


class ConfigError(MostError, ValueError):
    exit_code = 2


class UsageError(ConfigError):
    pass


class DimensionError(ConfigError):
    pass


class FormatError(MostError):
    """Malformed, truncated or mismatched checkpoint/dataset file."""

    exit_code = 3


class NumericError(MostError, ArithmeticError):
    exit_code = 4
