"""Exception types raised across the package."""


class VoxgraspError(Exception):
    """Base class for all package errors."""


class DomainError(VoxgraspError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ShapeError(VoxgraspError, ValueError):
    """Tensor or volume extents are inconsistent."""


class ConfigError(VoxgraspError, ValueError):
    """A configuration value is invalid or inconsistent."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class UsageError(VoxgraspError, RuntimeError):
    """An API was called in an order it does not support."""


class FormatError(VoxgraspError, IOError):
    """A file does not match its binary or text layout.

    ``offset`` is the byte (or line) position where parsing failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.offset = offset
