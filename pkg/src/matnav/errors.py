"""Exception types shared across the package."""


class MatNavError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(MatNavError, ValueError):
    """A terrain/scenario/config specification is malformed."""


class OutOfBoundsError(MatNavError, ValueError):
    """A world-coordinate query fell outside the map.

    Carries the offending point so planner bugs surface with context
    instead of being silently clamped.
    """

    def __init__(self, point, bounds=None):
        self.point = tuple(float(c) for c in point)
        self.bounds = bounds
        msg = f"query point {self.point} outside map bounds"
        if bounds is not None:
            msg += f" {bounds}"
        super().__init__(msg)


class MapFormatError(MatNavError, ValueError):
    """A map file could not be parsed. Carries the byte offset of the failure."""

    def __init__(self, message, offset):
        self.offset = int(offset)
        super().__init__(f"{message} (at byte offset {self.offset})")


class MapValidationError(MatNavError, ValueError):
    """A parsed map violates its invariants (names the offending cell)."""


class UnderDeterminedFitError(MatNavError, ValueError):
    """Too few samples / distinct velocities to fit Gaussian parameters."""


class ResampleError(MatNavError, ValueError):
    """A trajectory was too short to resample at the requested spacing."""


class GoalNotReachedError(MatNavError, ValueError):
    """Traversal metrics requested for a run that never reached its goal."""
