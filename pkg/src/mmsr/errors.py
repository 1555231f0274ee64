"""Exception hierarchy shared by every mmsr module.

The CLI maps these onto exit codes, so raise the most specific one.
"""


class MMSRError(Exception):
    """Base class for all errors raised by mmsr."""


class ConfigError(MMSRError, ValueError):
    """Invalid model/training configuration or mismatched parameter shapes."""


class ArgumentError(MMSRError, ValueError):
    """Bad argument to an operation (shape mismatch, bad factor, ...)."""


class NumericError(MMSRError, ArithmeticError):
    """A primitive produced or received NaN/Inf."""

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{where}: {message}")
        self.where = where


class StateError(MMSRError, RuntimeError):
    """Autodiff graph used in an invalid state (detached, already consumed)."""


class FormatError(MMSRError, ValueError):
    """Malformed image or checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(MMSRError, RuntimeError):
    """Training diverged; carries the epoch index where it happened."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch
