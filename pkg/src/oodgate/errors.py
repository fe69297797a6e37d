"""Exception hierarchy shared by every oodgate module."""


class OODGateError(Exception):
    """Base class for all library errors."""


# tensor-io
class Malformed(OODGateError, ValueError):
    pass


class UnsupportedDtype(OODGateError, ValueError):
    pass


class UnsupportedLayout(OODGateError, ValueError):
    pass


class IoFailure(OODGateError, OSError):
    pass


class SchemaMismatch(OODGateError, ValueError):
    pass


class InvariantViolation(OODGateError, ValueError):
    pass


# model-engine
class ShapeMismatch(OODGateError, ValueError):
    pass


class NonFiniteActivation(OODGateError, FloatingPointError):
    pass


class DivergedLoss(OODGateError, FloatingPointError):
    pass


class NotAFeatureLayer(OODGateError, ValueError):
    pass


class UnsupportedLayerForLRP(OODGateError, TypeError):
    pass


# detectors
class EmptySamples(OODGateError, ValueError):
    pass


class MissingFitStatistics(OODGateError, ValueError):
    pass


class SingularCovariance(OODGateError, ArithmeticError):
    pass


class ClassUnderpopulated(OODGateError, ValueError):
    pass


class DimensionMismatch(OODGateError, ValueError):
    pass


class MissingLayer(OODGateError, KeyError):
    pass


class EmptyClass(OODGateError, ValueError):
    pass


class ClassMissingInReference(OODGateError, KeyError):
    pass


# eval-harness
class EmptyClassOfScores(OODGateError, ValueError):
    pass


class EmptyScores(OODGateError, ValueError):
    pass


class SeedCountMismatch(OODGateError, ValueError):
    pass


# bench-synth
class InvalidSpec(OODGateError, ValueError):
    pass


class ArtefactOverlapsSignal(OODGateError, ValueError):
    pass


class SourceOverlapsMask(OODGateError, ValueError):
    pass


class OutOfBounds(OODGateError, ValueError):
    pass


# cli
class MissingUpstream(OODGateError, FileNotFoundError):
    """A stage was asked to run before the stage that feeds it."""
