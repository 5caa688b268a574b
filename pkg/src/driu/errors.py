"""Exception hierarchy shared by every driu module."""


class DRIUError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DRIUError, ValueError):
    pass


class InvalidArgumentError(DRIUError, ValueError):
    pass


class UnsupportedError(DRIUError, ValueError):
    pass


class ConfigError(DRIUError, ValueError):
    pass


class ConsistencyError(DRIUError, ValueError):
    pass


class SizeError(DRIUError, ValueError):
    pass


class EmptyDatasetError(DRIUError, ValueError):
    pass


class IntegrityError(DRIUError, ValueError):
    """A dataset on disk violates the documented layout."""


class FormatError(DRIUError, ValueError):
    """Malformed or truncated binary input. ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedBoundaryError(DRIUError, ValueError):
    pass


class TrainingDiverged(DRIUError, RuntimeError):
    """Raised when the loss becomes NaN/Inf; ``diagnostics`` holds a dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
