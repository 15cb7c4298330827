"""Exception hierarchy.

``ValueError`` subclasses signal bad input (CLI exit code 1); subclasses of
:class:`NumericalError` signal a numerical failure (CLI exit code 2).
"""


class DimensionMismatchError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class RankDeficientError(NumericalError):
    def __init__(self, message, tolerance=None):
        super().__init__(message)
        self.tolerance = tolerance


class InfeasibleSystemError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch, batch, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}; "
            "lower the learning rate or check the data"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class GeneratorError(NumericalError):
    pass
