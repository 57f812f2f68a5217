"""Exception types shared across the package."""


class DpSynthError(Exception):
    """Base class for all package errors."""


class DimensionError(DpSynthError):
    """Array shapes are incompatible for the requested operation."""


class ContractError(DpSynthError):
    """An operation was called outside its documented preconditions."""


class ParseError(DpSynthError):
    """A raw value (code, cell, file) could not be interpreted."""


class ConfigError(DpSynthError):
    """An invalid configuration value."""


class SchemaError(DpSynthError):
    """Table contents do not match the declared schema."""


class BalanceError(DpSynthError):
    """Label balancing is impossible (a class has zero rows)."""


class NumericGuardError(DpSynthError):
    """A value left its numerically safe range (e.g. probabilities hitting 0/1)."""


class TrainingDivergedError(DpSynthError):
    """Training produced a non-finite loss and was aborted."""


class MetricUndefinedError(DpSynthError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class RunError(DpSynthError):
    """A pipeline run cannot proceed (e.g. privacy budget spent before the
    first epoch finished, or a sweep leg failed)."""
