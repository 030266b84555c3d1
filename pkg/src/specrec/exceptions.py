"""Exception hierarchy shared by every module."""


class SpecrecError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SpecrecError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInputError(SpecrecError):
    pass


class InsufficientDataError(SpecrecError):
    pass


class ConfigError(SpecrecError, ValueError):
    pass


class EmptyTestError(SpecrecError):
    pass


class NonFiniteGradientError(SpecrecError, FloatingPointError):
    def __init__(self, epoch, batch, max_abs_grad):
        self.epoch = epoch
        self.batch = batch
        self.max_abs_grad = max_abs_grad
        super().__init__(
            f"non-finite gradient at epoch {epoch}, batch {batch} (max |grad| = {max_abs_grad})"
        )


class TrainingDivergedError(SpecrecError, FloatingPointError):
    def __init__(self, epoch, last_good_epoch):
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch
        super().__init__(
            f"training loss became non-finite at epoch {epoch}; last good epoch {last_good_epoch}"
        )


class DegenerateError(SpecrecError):
    """A quantity is undefined for the given (e.g. all-zero) embeddings."""


class SizeLimitError(SpecrecError):
    pass


class DivergenceError(SpecrecError, ValueError):
    """A series or bound is undefined for the requested parameters."""
