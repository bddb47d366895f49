"""Exception types raised across the package."""


class ShapeError(ValueError):
    """An array does not have the shape a layer or network expects."""


class CaptureError(RuntimeError):
    """A mode pass was requested without the capture it depends on."""


class ConvergenceError(RuntimeError):
    """Iterative solver hit its iteration cap.

    The last estimate is kept on ``estimate`` so callers can still report it.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class DegenerateChannelError(ValueError):
    """A channel has zero standard deviation and cannot be normalized."""


class IdxParseError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
