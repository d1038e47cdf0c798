"""Exception types shared across the package."""


class DigsError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(DigsError):
    """A parameter violates its contract (non-unit quaternion, delta <= 0, ...)."""


class InvalidInputError(DigsError):
    """Caller supplied malformed input (empty set, dimension mismatch, ...)."""


class InvalidLevelError(DigsError):
    """LoD level outside [0, max_level]."""


class OutOfBoundsError(DigsError):
    """Point outside the grid's scene bounds."""


class MissingCellError(DigsError):
    """Query in a voxel cell that is not occupied."""


class TapeStateError(DigsError):
    """Backward requested without a recorded forward pass."""


class PlyParseError(DigsError):
    """Malformed PLY file; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
