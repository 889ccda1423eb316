"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or axes that cannot be combined."""


class ParameterError(ValueError):
    """An argument value outside its contract."""


class FormatError(ValueError):
    """A malformed tensor file; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; names the iteration."""

    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
