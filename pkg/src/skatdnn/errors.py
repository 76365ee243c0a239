"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, hyper-parameters or configuration values."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""
