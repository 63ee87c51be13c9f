"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


class CapabilityError(RuntimeError):
    """Raised when a backend lacks a required capability."""


class DegenerateMaskError(RuntimeError):
    """Raised when object-mask extraction produces an empty mask."""


class UndefinedMetricError(RuntimeError):
    """Raised when a metric is undefined for the given inputs (e.g. zero mass)."""


class NotFoundError(KeyError):
    """Raised when a run id is unknown to the store."""


class FormatError(RuntimeError):
    """Raised when a persisted blob fails magic/version/size checks."""


class OptimizationDivergedError(RuntimeError):
    """Raised when the trailing-weight optimization hits a non-finite loss or gradient.

    Carries the iterate history accumulated up to the failure.
    """

    def __init__(self, message, iterate_history):
        super().__init__(message)
        self.iterate_history = iterate_history
