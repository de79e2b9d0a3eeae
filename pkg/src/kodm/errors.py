"""Exception hierarchy shared by the library and the CLI."""


class KodmError(Exception):
    """Base class for every error raised by kodm."""

    exit_code = 1


class DomainError(KodmError, ValueError):
    """An argument lies outside the domain of an operation."""

    exit_code = 3


class ConfigError(KodmError, ValueError):
    exit_code = 2


class FormatError(KodmError):
    """Malformed file content. ``offset`` is the byte position of the problem."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StaleCacheError(KodmError):
    """Trajectory cache was written for a different schedule or topology."""

    exit_code = 3


class NumericalError(KodmError, ArithmeticError):
    exit_code = 4
