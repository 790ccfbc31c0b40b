"""Exception taxonomy shared by the whole engine.

The CLI and HTTP service map these onto exit codes / status codes, so new
failure modes should reuse one of the classes below rather than raising
bare ValueError.
"""


class ErnetError(Exception):
    """Base class for all engine errors."""


class ShapeError(ErnetError):
    """Tensor extents incompatible with the requested operation."""


class ArgumentError(ErnetError, ValueError):
    """A scalar or enum argument is out of its documented range."""


class DatasetError(ErnetError):
    """Dataset tree or manifest violates the expected layout."""


class FormatError(ErnetError):
    """A serialized model file is malformed, truncated, or corrupt."""


class EvalError(ErnetError):
    """Evaluation preconditions violated (e.g. a class missing from the split)."""


class StateError(ErnetError):
    """Operation called with state from the wrong phase (train vs infer)."""


class TrainingDiverged(ErnetError):
    """Loss became non-finite; carries the position where it happened."""

    def __init__(self, epoch: int, iteration: int, lr: float, loss: float):
        self.epoch = epoch
        self.iteration = iteration
        self.lr = lr
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, iteration {iteration}, lr {lr:g}"
        )
