"""Exception hierarchy shared across the toolkit."""


class MgcnError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(MgcnError, ValueError):
    pass


class MeshError(MgcnError, ValueError):
    pass


class IsolatedVertex(MeshError):
    pass


class ZeroDegree(MeshError):
    pass


class DegenerateFace(MeshError):
    pass


class NoConvergence(MgcnError, RuntimeError):
    pass


class NonPositiveLambda(MgcnError, ValueError):
    pass


class ParseError(MgcnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonTriangleFace(ParseError):
    pass


class TargetUnreachable(MgcnError, RuntimeError):
    pass


class EmptyCoarseMesh(MgcnError, ValueError):
    pass


class InvalidProbability(MgcnError, ValueError):
    pass


class ConfigMismatch(MgcnError, ValueError):
    pass


class EmptyDataset(MgcnError, ValueError):
    pass


class DivergedLoss(MgcnError, RuntimeError):
    """Raised when training produces a non-finite loss.

    ``checkpoint`` holds the last good model state, if any.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class RankDeficiency(MgcnError, RuntimeError):
    pass


class BehindCamera(MgcnError, ValueError):
    pass


class DegenerateLandmarks(MgcnError, ValueError):
    pass


class EmptyMesh(MgcnError, ValueError):
    pass


class EmptyMask(MgcnError, ValueError):
    pass


class CheckpointError(MgcnError, ValueError):
    pass


class IoError(MgcnError, OSError):
    pass
