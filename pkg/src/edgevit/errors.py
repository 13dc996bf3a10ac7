"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not fit the operation."""


class NumericError(ArithmeticError):
    """An iterative routine failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FormatError(ValueError):
    """A file on disk does not follow its declared layout."""


class UnreachableTarget(RuntimeError):
    """The pruning loop ran out of thresholds before reaching the target rate."""

    def __init__(self, message, best_rate, model=None, report=None):
        super().__init__(message)
        self.best_rate = best_rate
        self.model = model
        self.report = report


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last good weights."""

    def __init__(self, message, model=None, epoch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch
