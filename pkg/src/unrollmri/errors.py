"""Exception types shared across the package."""


class UnrollMriError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(UnrollMriError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ParameterError(UnrollMriError, ValueError):
    """A scalar/config argument is outside its valid range."""


class FormatError(UnrollMriError, ValueError):
    """A serialized tensor/checkpoint file is malformed.

    ``offset`` is the byte offset at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(UnrollMriError, ArithmeticError):
    """Non-finite values or numerical breakdown inside a solver."""


class NotPositiveDefiniteError(NumericError):
    """The operator handed to the CG solver is not positive definite."""


class CacheMismatchError(UnrollMriError, RuntimeError):
    """A backward pass was fed a cache from a different forward pass."""
