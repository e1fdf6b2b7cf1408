"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so new errors should subclass the
closest existing category rather than ``Exception`` directly.
"""


class MemotionError(Exception):
    """Base class for all package errors."""


class ShapeError(MemotionError, ValueError):
    pass


class ContractError(MemotionError, RuntimeError):
    """A caller broke an operation's precondition (wrong tape, non-scalar loss...)."""


class ConfigError(MemotionError, ValueError):
    pass


# --- data errors (CLI exit code 2) -------------------------------------------------


class DataError(MemotionError):
    pass


class InputError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class FormatError(DataError, ValueError):
    pass


class DecodeError(DataError, ValueError):
    pass


class CorruptionError(DataError, ValueError):
    def __init__(self, message, index=None):
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)
        self.index = index


# --- training / checkpoint errors --------------------------------------------------


class NumericalError(MemotionError, FloatingPointError):
    """Raised when training produces a non-finite loss (CLI exit code 3)."""


class CheckpointError(MemotionError):
    """Corrupt or incompatible checkpoint (CLI exit code 4)."""
