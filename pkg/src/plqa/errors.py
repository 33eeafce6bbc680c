"""Exception hierarchy shared by all plqa modules."""


class PlqError(Exception):
    """Base class for errors raised by plqa."""


class ShapeError(PlqError, ValueError):
    """An array did not have the shape a layer or operation expects."""

    def __init__(self, what, expected, actual, layer_index=None):
        self.what = what
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        self.layer_index = layer_index
        where = f"layer {layer_index} ({what})" if layer_index is not None else what
        super().__init__(f"{where}: expected shape {self.expected}, got {self.actual}")

    def at(self, layer_index):
        return ShapeError(self.what, self.expected, self.actual, layer_index)


class FormatError(PlqError, ValueError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(PlqError, ArithmeticError):
    """A computation is undefined for the given data (zero embedding, zero variance, ...)."""


class InputError(PlqError, ValueError):
    """Input data violates a precondition (non-finite pixels, out-of-range values, ...)."""
