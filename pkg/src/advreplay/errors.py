"""Exception taxonomy shared by all advreplay modules."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EngineError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(EngineError):
    """A computation produced a non-finite or numerically invalid result."""


class ContractError(EngineError):
    """A caller violated a documented precondition."""


class ConfigError(EngineError):
    """A configuration value is out of range or internally inconsistent."""


class StatsError(EngineError):
    """Not enough data to estimate the requested statistic."""


class DecodeError(EngineError):
    """A serialized record could not be parsed."""
