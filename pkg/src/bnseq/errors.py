"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operand lies outside the mathematical domain of an operation.

    ``index`` holds the position (a tuple into the offending operand) of the
    first invalid element.
    """

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} at index {index}")
        self.index = index


class StateError(RuntimeError):
    """A layer or object is used in a state that does not support the call."""


class ConfigError(ValueError):
    """An experiment or training configuration is invalid."""


class EndOfEpoch(Exception):
    """Raised by a batch schedule once every window of the epoch was served."""
