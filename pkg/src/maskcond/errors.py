"""Exception hierarchy shared by all maskcond modules."""


class MaskCondError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(MaskCondError, ValueError):
    pass


class DuplicateCategory(SchemaError):
    pass


class EmptyFeatureSet(SchemaError):
    pass


class InvalidRange(SchemaError):
    pass


class SchemaMismatch(MaskCondError, ValueError):
    pass


class InvalidProbability(MaskCondError, ValueError):
    pass


class IndexOutOfRange(MaskCondError, IndexError):
    pass


class NonFiniteValue(MaskCondError, ValueError):
    pass


class NonFiniteInput(NonFiniteValue):
    pass


class StepOutOfRange(MaskCondError, ValueError):
    pass


class DivergenceDetected(MaskCondError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at gradient update {step}")


class InvalidScheduleBounds(MaskCondError, ValueError):
    pass


class TimestepOutOfRange(MaskCondError, ValueError):
    pass


class ShapeMismatch(MaskCondError, ValueError):
    pass


class UnknownCategoryLabel(MaskCondError, ValueError):
    pass


class MissingColumn(MaskCondError, KeyError):
    pass


class MalformedNumber(MaskCondError, ValueError):
    pass


class EmptySplit(MaskCondError, ValueError):
    pass


class SizeTooLarge(MaskCondError, ValueError):
    pass


class CorruptCheckpoint(MaskCondError, ValueError):
    pass


class IncompatibleVersion(MaskCondError, ValueError):
    pass
