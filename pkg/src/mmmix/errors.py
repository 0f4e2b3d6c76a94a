"""Exception hierarchy shared by every module."""


class MMError(Exception):
    """Base class for all package errors."""


class DomainError(MMError, ValueError):
    """An argument lies outside the operation's domain."""


class DegenerateError(MMError, ValueError):
    """Input collapses to a point or a zero vector where a direction is needed."""


class ConstructionError(MMError, RuntimeError):
    pass


class CacheError(MMError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(MMError, ValueError):
    pass


class ShapeError(MMError, ValueError):
    pass


class NumericError(MMError, FloatingPointError):
    """A non-finite value appeared in a loss or gradient.

    ``step`` is the last step that completed cleanly (``-1`` if none).
    """

    def __init__(self, message: str, step: int = -1, tensor: str | None = None, index=None):
        super().__init__(message)
        self.step = step
        self.tensor = tensor
        self.index = index


class FormatError(MMError, ValueError):
    """A binary file failed validation; ``offset`` locates the bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
