"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`StratarmError` so callers (and the CLI) can catch one type.
"""


class StratarmError(Exception):
    """Base class for all package errors."""


class DataError(StratarmError, ValueError):
    """Malformed or inconsistent experiment data."""


class MissingColumn(DataError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing column: {column!r}")


class NonNumericCell(DataError):
    def __init__(self, row, col):
        self.row = row
        self.col = col
        super().__init__(f"non-numeric or non-finite cell at row {row}, column {col!r}")


class NonBinaryTreatment(DataError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"treatment value at row {row} is not 0/1")


class EmptyInput(DataError):
    pass


class EmptyArm(DataError):
    pass


class RankDeficient(StratarmError, ArithmeticError):
    """Regressors are (numerically) collinear."""


class DesignError(StratarmError, ValueError):
    """A design cannot be built or is unusable for the requested operation."""


class StratumTooSmall(DesignError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"stratum {label!r} has fewer units than the group size")


class SingleGroup(DesignError):
    pass


class MissingPairing(DesignError):
    pass


class DegenerateUnion(DesignError):
    pass


class DegeneratePropensity(DesignError):
    pass


class WeakFirstStage(StratarmError, ArithmeticError):
    pass


class NotRegressionBased(StratarmError, TypeError):
    pass


class UnknownModel(StratarmError, KeyError):
    pass


class FailureBudgetExceeded(StratarmError, RuntimeError):
    def __init__(self, failed, reps):
        self.failed = failed
        self.reps = reps
        super().__init__(f"{failed} of {reps} replications failed (budget is 1%)")
