"""Exception hierarchy shared by every fairdro module."""


class FairDROError(Exception):
    """Base class for all errors raised by this package."""


class DataError(FairDROError, ValueError):
    pass


class MalformedRow(DataError):
    def __init__(self, line, reason):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class UnknownLabelValue(DataError):
    def __init__(self, value, line=None):
        self.value = value
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown label value {value!r}{where}")


class EmptyFile(DataError):
    pass


class FractionOutOfRange(DataError):
    pass


class DimensionMismatch(FairDROError, ValueError):
    pass


class EmptyProtectedGroup(FairDROError, ValueError):
    """A group needed by a fairness quantity has no samples."""

    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"protected group (a={cell[0]}, y={cell[1]}) is empty")


class EmptyCell(FairDROError, ValueError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"cell (a={cell[0]}, y={cell[1]}) has no samples")


class LevelOutOfRange(FairDROError, ValueError):
    pass


class InfeasibleSpec(FairDROError, ValueError):
    """The model configuration admits no feasible classifier."""


class GammaOutOfRange(FairDROError, ValueError):
    pass


class BadSimplexPoint(FairDROError, ValueError):
    pass


class DomainError(FairDROError, ValueError):
    pass


class MissingTags(FairDROError, KeyError):
    pass


class NumericalFailure(FairDROError, RuntimeError):
    def __init__(self, message, report=None):
        self.report = report or {}
        super().__init__(message)


class BoxBindingWarning(UserWarning):
    """The classifier sits on the big-M box; the box may have changed the optimum."""
