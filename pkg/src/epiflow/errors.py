"""Exception hierarchy shared across the package."""


class EpiflowError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EpiflowError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(EpiflowError, ValueError):
    """A configuration value or weight file is unusable."""


class ParseError(EpiflowError, ValueError):
    """A file does not follow its documented format."""


class GeometryError(EpiflowError, ArithmeticError):
    """Base class for camera-geometry failures."""


class BehindCameraError(GeometryError):
    pass


class DegenerateTriangulationError(GeometryError):
    """The selected triangulation branch has a near-zero denominator."""


class NegativeDepthError(GeometryError):
    """Triangulation produced a non-positive depth (inconsistent flow)."""


class NoEpipolarGeometryError(GeometryError):
    """The camera pair has no usable baseline."""


class ReconstructionFailedError(EpiflowError):
    """Every pixel of a view was masked out during iteration."""


class UndefinedMetricError(EpiflowError, ValueError):
    pass
