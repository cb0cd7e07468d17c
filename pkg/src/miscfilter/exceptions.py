"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, channel counts or hyperparameters."""


class InputError(ValueError):
    """Input data that violates a documented precondition."""


class NumericError(ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class FormatError(OSError):
    """Corrupt or truncated binary container.

    Parameters
    ----------
    message : str
        Human-readable description.
    offset : int
        Byte offset in the file at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
