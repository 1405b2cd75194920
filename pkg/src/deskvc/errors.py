"""Exception types shared across the package.

The CLI maps these onto exit codes: input/config problems exit 1,
state/numeric/runtime problems exit 2.
"""


class DeskVCError(Exception):
    """Base class for all package errors."""


class InputError(DeskVCError, ValueError):
    """Invalid argument or malformed input data."""


class ConfigError(InputError):
    """Invalid static configuration (dims, layer setup, config files)."""


class StateError(DeskVCError, RuntimeError):
    """Operation requires state (trained params, checkpoint) that is absent."""


class NumericError(DeskVCError, ArithmeticError):
    """Numerical failure: NaN loss, rank-deficient covariance, divergence."""


class UndefinedMetricError(NumericError):
    """A metric is undefined for the given inputs (e.g. too few voiced frames)."""
