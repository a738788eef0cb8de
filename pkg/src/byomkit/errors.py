"""Exception hierarchy.

Everything raised on purpose derives from :class:`ByomError`. The CLI maps
:class:`IoFailure` to exit code 2 and every other ``ByomError`` to exit code 1.
"""


class ByomError(Exception):
    pass


class ValidationError(ByomError, ValueError):
    """Inputs violate an operation's preconditions."""


class KeyMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class RatioOutOfRange(ValidationError):
    pass


class NotAMatrix(ValidationError):
    pass


class InnerDimMismatch(ValidationError):
    pass


class RankOutOfRange(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class EmptyTaskSet(ValidationError):
    pass


class WeightMismatch(ValidationError):
    pass


class NonConvexWeights(ValidationError):
    pass


class NegativeWeight(ValidationError):
    pass


class FingerprintMismatch(ValidationError):
    pass


class TargetMissing(ValidationError):
    pass


class BadSpec(ValidationError):
    pass


class ConvergenceFailure(ByomError, ArithmeticError):
    pass


class DivergenceDetected(ByomError, ArithmeticError):
    pass


class StorageError(ByomError):
    """A file could not be decoded into a valid artifact."""


class IoFailure(StorageError, OSError):
    pass


class MalformedHeader(StorageError):
    pass


class OffsetOverlap(StorageError):
    pass


class TruncatedPayload(StorageError):
    pass


class UnsupportedDtype(StorageError):
    pass


class VariantMixing(StorageError):
    pass


class UnsortedIndices(StorageError):
    pass


class IndexOutOfRange(StorageError, ValidationError):
    """A sparse index points past the end of its tensor."""
