"""Exception hierarchy shared by every tgopt module."""


class TgoptError(Exception):
    """Base class for all package errors."""


class DataError(TgoptError, ValueError):
    pass


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"required column {column!r} not found")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, row, col, value=None):
        super().__init__(f"non-numeric cell at row {row}, column {col!r}: {value!r}")
        self.row = row
        self.col = col


class InconsistentDimensions(DataError):
    pass


class TaskTooSmall(DataError):
    def __init__(self, task_id, n):
        super().__init__(f"task {task_id!r} has {n} samples, at least 2 required")
        self.task_id = task_id


class EmptyFile(DataError):
    pass


class TooFewSamples(DataError):
    pass


class InvalidSpec(TgoptError, ValueError):
    pass


class ShapeMismatch(TgoptError, ValueError):
    pass


class DomainError(TgoptError, ValueError):
    pass


class DegenerateLabels(TgoptError, ValueError):
    pass


class NumericalDivergence(TgoptError, ArithmeticError):
    pass


class MissingCheckpoint(TgoptError, KeyError):
    pass


class DegenerateFit(TgoptError, ValueError):
    pass


class GroupTooSmall(TgoptError, ValueError):
    pass


class ZeroStlSum(TgoptError, ZeroDivisionError):
    pass


class NonBinaryForHamming(TgoptError, ValueError):
    pass


class MissingPairGain(TgoptError, KeyError):
    pass


class ZeroVariance(TgoptError, ValueError):
    pass


class TooFewRecords(TgoptError, ValueError):
    pass


class MissingFeature(TgoptError, KeyError):
    pass


class MissingPrerequisite(TgoptError, KeyError):
    pass


class OutOfRange(TgoptError, ValueError):
    pass


class DegenerateVectors(TgoptError, ValueError):
    pass


class ConfigInvalid(TgoptError, ValueError):
    pass


class MissingPrerequisiteStage(TgoptError, RuntimeError):
    pass
