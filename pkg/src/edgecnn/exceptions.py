"""Exception hierarchy shared by every module."""


class EdgeCNNError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ShapeError(EdgeCNNError, ValueError):
    pass


class ConfigError(EdgeCNNError, ValueError):
    pass


class InputError(EdgeCNNError, ValueError):
    pass


class NumericError(EdgeCNNError, ArithmeticError):
    pass


class FormatError(EdgeCNNError, ValueError):
    """Malformed serialized model or image.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
