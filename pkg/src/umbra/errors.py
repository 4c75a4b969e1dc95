"""Exception types raised across the package."""


class UmbraError(Exception):
    """Base class for all package errors."""


class RayParallelToPlane(UmbraError):
    pass


class RayPointsAway(UmbraError):
    pass


class PointBehindCamera(UmbraError):
    pass


class EmptyLevelSet(UmbraError):
    pass


class DimensionMismatch(UmbraError, ValueError):
    pass


class DomainError(UmbraError, ValueError):
    pass


class NoValidPixels(UmbraError):
    pass


class NonFiniteGradient(UmbraError, FloatingPointError):
    pass


class EmptyTrainingSet(UmbraError, ValueError):
    pass


class DegenerateScene(UmbraError):
    pass


class ParseError(UmbraError, ValueError):
    """Malformed input file. ``position`` is a line number or byte offset."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class SchemaVersionMismatch(UmbraError, ValueError):
    pass
