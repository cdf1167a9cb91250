"""Exception hierarchy shared by all modules."""


class DynSlamError(Exception):
    """Base class for every error raised by the package."""


# geometry
class GeometryError(DynSlamError):
    pass


class AngleNearPi(GeometryError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class BehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class OutOfBounds(GeometryError):
    pass


# data io
class DataError(DynSlamError):
    """Base for input/output problems. Each carries the offending path."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class MissingRequiredFile(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class CorruptRaster(DataError):
    pass


class FrameMismatch(DataError):
    pass


class ConfigError(DynSlamError):
    pass


class ConfigInvalid(ConfigError):
    pass


# estimation
class EstimationError(DynSlamError):
    pass


class TooFewPoints(EstimationError):
    pass


class DegenerateGeometry(EstimationError):
    pass


class SolverError(DynSlamError):
    pass


class SingularNormalEquations(SolverError):
    pass


class NotConverged(SolverError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyMap(SolverError):
    pass


class NoPoints(DynSlamError):
    pass
