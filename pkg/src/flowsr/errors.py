"""Exception hierarchy shared across the package."""


class FlowSRError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowSRError, ValueError):
    pass


class DimensionError(FlowSRError, ValueError):
    pass


class UsageError(FlowSRError, ValueError):
    pass


class RangeError(FlowSRError, ValueError):
    pass


class DegenerateConfigError(ConfigError):
    pass


class NumericError(FlowSRError, FloatingPointError):
    """Non-finite values encountered during training or integration."""


class StiffnessError(NumericError):
    pass


class FrozenModelError(FlowSRError, RuntimeError):
    pass


class CheckpointError(FlowSRError, IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class UnreliableEstimateError(FlowSRError, RuntimeError):
    pass


class OracleValidationError(FlowSRError, AssertionError):
    pass
