"""Exception types shared by every stage of the pipeline.

Each error carries the process exit code the CLI uses for it.
"""


class TBCalError(Exception):
    exit_code = 1


class ConfigError(TBCalError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 3


class DataError(TBCalError, ValueError):
    """Malformed, mismatched or too-short input data."""

    exit_code = 4


class RegimeUnsupported(TBCalError):
    """Requested operating point lies outside the supported regimes."""

    exit_code = 5


class DegenerateDenominator(TBCalError, ArithmeticError):
    """An estimator denominator is zero or statistically consistent with zero."""

    exit_code = 6


class WindowTooShort(UserWarning):
    """Correlation has not decayed at the edge of the lag window."""
