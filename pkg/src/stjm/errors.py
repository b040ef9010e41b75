"""Exception types raised across the package."""


class InvalidDimensionError(ValueError):
    pass


class GraphError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    """Cholesky factorisation hit a non-positive pivot.

    Attributes:
        pivot: 0-based index of the offending pivot.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class DegenerateConditionalError(ValueError):
    pass


class InvalidHyperparameterError(ValueError):
    pass


class ModelSpecError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Newton iterations failed to converge.

    Attributes:
        trace: max absolute step per iteration.
    """

    def __init__(self, message: str, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class SelectionError(ValueError):
    pass
