"""Exception types raised across the package."""


class ModaError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ModaError, ValueError):
    pass


class AllMaskedRow(ModaError, ValueError):
    pass


class NonFiniteEntry(ModaError, ValueError):
    pass


class UnknownModality(ModaError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DimMismatch(ModaError, ValueError):
    pass


class DuplicateModality(ModaError, ValueError):
    pass


class DegenerateGram(ModaError, ValueError):
    pass


class RankExceedsDim(ModaError, ValueError):
    pass


class InvalidDecay(ModaError, ValueError):
    pass


class BothZero(ModaError, ValueError):
    pass


class NonPositiveSeries(ModaError, ValueError):
    pass


class DivergedLoss(ModaError, FloatingPointError):
    pass


class IoFailure(ModaError, OSError):
    pass


class ConfigError(ModaError, ValueError):
    pass
