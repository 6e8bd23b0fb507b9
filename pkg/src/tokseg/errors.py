"""Exception hierarchy shared by every module of the package."""


class TokSegError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(TokSegError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class Indivisible(ShapeMismatch):
    pass


class MaskShapeMismatch(ShapeMismatch):
    pass


class BadImageShape(ShapeMismatch):
    pass


class NonFinite(TokSegError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NotScalar(TokSegError, ValueError):
    pass


class GraphConsumed(TokSegError, RuntimeError):
    pass


class MissingGrad(TokSegError, KeyError):
    pass


class NoSegToken(TokSegError, ValueError):
    pass


class VocabOverflow(TokSegError, ValueError):
    pass


class SharingViolation(TokSegError, ValueError):
    pass


class NonBinaryGT(TokSegError, ValueError):
    pass


class NoUniqueReferent(TokSegError, ValueError):
    pass


class FormatVersionMismatch(TokSegError, ValueError):
    pass


class CategoryCountMismatch(TokSegError, ValueError):
    pass


class EmptyRecords(TokSegError, ValueError):
    pass


class ConfigParse(TokSegError, ValueError):
    pass


class DatasetMissing(TokSegError, FileNotFoundError):
    pass


class CheckpointVersion(TokSegError, ValueError):
    pass
