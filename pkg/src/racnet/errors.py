"""Exception hierarchy shared across the package."""


class RacnetError(Exception):
    pass


class ConfigError(RacnetError, ValueError):
    """Invalid configuration values or unknown keys."""


class DataError(RacnetError, ValueError):
    """Inputs inconsistent with what an operation needs (e.g. missing labels)."""


class ShapeError(RacnetError, ValueError):
    pass


class PlanError(RacnetError, ValueError):
    pass


class CapacityError(RacnetError, ValueError):
    """Volume longer than the model's padded length."""


class ModelError(RacnetError, ValueError):
    pass


class CodecError(RacnetError, ValueError):
    """Base class for volume / checkpoint file decoding failures."""


class BadMagicError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class DimensionError(CodecError):
    pass
