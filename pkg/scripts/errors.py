class DriftcastError(Exception):
    """Base class for every error raised by driftcast modules."""


class FormatError(DriftcastError):
    pass


class InvariantError(DriftcastError, ValueError):
    pass


class ConfigError(DriftcastError, ValueError):
    pass


class RangeError(DriftcastError, ValueError):
    pass


class ShapeError(DriftcastError, ValueError):
    pass


class NumericError(DriftcastError, ArithmeticError):
    pass


class AccumulationError(DriftcastError, RuntimeError):
    pass


class IoError(DriftcastError, OSError):
    pass


class DivergenceError(DriftcastError, ArithmeticError):
    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"Training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss

    def __reduce__(self):
        return (DivergenceError, (self.epoch, self.loss))
