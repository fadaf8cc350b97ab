"""Exception hierarchy.

Every error raised on purpose by the library derives from ``GarmentError`` so
callers (and the CLI) can separate validation problems from numerical
divergence.
"""


class GarmentError(Exception):
    """Base class for all library errors."""


class ValidationError(GarmentError, ValueError):
    """Bad input data. The CLI maps these to exit code 2."""


class DivergenceError(GarmentError, RuntimeError):
    """Numerical blow-up. The CLI maps these to exit code 3."""


class InvalidMesh(ValidationError):
    pass


class InvalidSurfacePoint(ValidationError):
    pass


class DegenerateFace(ValidationError):
    pass


class MissingRestState(ValidationError):
    pass


class StaleCollisionSet(ValidationError):
    pass


class UvCoverageError(ValidationError):
    pass


class NotAnAsset(ValidationError):
    pass


class UnsupportedVersion(ValidationError):
    pass


class CorruptAsset(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyObservation(ValidationError):
    pass


class EmptyPointCloud(ValidationError):
    pass


class EmptyGeometry(ValidationError):
    pass


class MissingBody(ValidationError):
    pass


class TopologyMismatch(ValidationError):
    pass


class InvalidScaleField(ValidationError):
    pass


class UnknownScene(ValidationError):
    pass


class DivergedOptimization(DivergenceError):
    def __init__(self, message, iteration=None, frame=None):
        super().__init__(message)
        self.iteration = iteration
        self.frame = frame


class DivergedSimulation(DivergenceError):
    def __init__(self, message, stage=None, epoch=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
