"""Exception types raised across the package."""


class TrajclustError(Exception):
    """Base class for all package errors."""


class SchemaError(TrajclustError, ValueError):
    """Input file structure is wrong (missing columns, duplicated keys)."""


class ValidationError(TrajclustError, ValueError):
    """A value violates its domain (negative time, bad status, bad parameter)."""


class JoinError(TrajclustError, ValueError):
    """Records in two inputs do not line up."""


class EmptyFeatureError(TrajclustError, ValueError):
    pass


class StepSizeError(TrajclustError, RuntimeError):
    """Backtracking line search could not find an acceptable step."""


class ConditioningError(TrajclustError, RuntimeError):
    pass


class DivergenceError(TrajclustError, RuntimeError):
    pass


class CalibrationError(TrajclustError, RuntimeError):
    pass


class TuningError(TrajclustError, ValueError):
    pass


class UndefinedMetricError(TrajclustError, ValueError):
    """A metric has no valid pairs/classes to be computed on."""
