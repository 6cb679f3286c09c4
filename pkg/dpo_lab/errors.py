"""
Exception types raised by dpo-lab
"""


class DpoError(Exception):
    """Base class for errors raised by this package"""


class ConfigError(DpoError, ValueError):
    """Invalid configuration file or configuration value"""


class NonFiniteError(DpoError, ArithmeticError):
    """A loss, gradient or parameter vector became NaN or infinite"""


class UndefinedBaselineError(DpoError):
    """The optimal baseline is undefined for a degenerate policy"""


class UnsupportedCapabilityError(DpoError):
    """A rollout source cannot provide the requested capability"""
