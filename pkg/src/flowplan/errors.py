"""Exception types shared across the package."""


class FlowPlanError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowPlanError, ValueError):
    """Array dimensions do not line up."""


class ConfigError(FlowPlanError, ValueError):
    """Invalid configuration value."""


class ContractError(FlowPlanError, ValueError):
    """A call violated an operation's preconditions."""


class LengthError(ConfigError):
    """Trajectory length incompatible with the network (e.g. not a power of 2)."""


class NumericError(FlowPlanError, FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class SamplingError(NumericError):
    """Non-finite state during ODE integration."""


class GuidanceError(NumericError):
    """Non-finite cost gradient during guided sampling."""


class FormatError(FlowPlanError, ValueError):
    """A persisted file could not be decoded."""
