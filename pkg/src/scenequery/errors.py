"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class SceneQueryError(Exception):
    """Base class for all package errors."""


# geometry
class GeometryError(SceneQueryError):
    pass


class EmptyProjection(GeometryError):
    pass


class DimensionMismatch(GeometryError, ValueError):
    pass


class EmptySelection(GeometryError, ValueError):
    pass


class InvalidCapture(SceneQueryError, ValueError):
    """Manifest or capture content violates a structural invariant."""


# superpoints / spectral
class TooFewPoints(SceneQueryError, ValueError):
    pass


class MissingLabelFeature(SceneQueryError, ValueError):
    pass


class ConvergenceFailure(SceneQueryError, ArithmeticError):
    pass


class TooFewEigenvalues(SceneQueryError, ValueError):
    pass


# embeddings
class ZeroVector(SceneQueryError, ArithmeticError):
    pass


# agents
class AgentError(SceneQueryError):
    pass


class ParseFailure(AgentError):
    pass


class ProviderUnavailable(AgentError):
    pass


class AuthError(AgentError):
    pass


class RateLimited(AgentError):
    pass


# scene graph
class MissingDepth(SceneQueryError, ValueError):
    pass


class EmptyScene(SceneQueryError, ValueError):
    pass


class StageError(SceneQueryError):
    """Wraps a failure raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# reasoning
class EmptyGraph(SceneQueryError, ValueError):
    pass


class NotACandidate(AgentError):
    pass


# evaluation
class IdMismatch(SceneQueryError, ValueError):
    pass


class LengthMismatch(SceneQueryError, ValueError):
    pass


class PlacementFailure(SceneQueryError):
    pass
