"""Exception types shared across steerkit modules."""


class SteerkitError(Exception):
    """Base class; the CLI maps any of these to exit status 1."""


class DegenerateInput(SteerkitError):
    pass


class DegenerateDirection(SteerkitError):
    pass


class NonScalarLoss(SteerkitError):
    pass


class ShapeMismatch(SteerkitError):
    pass


class InvalidConfig(SteerkitError):
    pass


class TokenOutOfRange(SteerkitError):
    pass


class SequenceTooLong(SteerkitError):
    pass


class EmptyResponse(SteerkitError):
    pass


class QuotaInfeasible(SteerkitError):
    pass


class FormatError(SteerkitError):
    pass


class MissingClass(SteerkitError):
    pass


class EmptyPositives(SteerkitError):
    pass


class PairCountMismatch(SteerkitError):
    pass


class IndexOutOfRange(SteerkitError):
    pass


class TooManyPlants(SteerkitError):
    pass


class DimensionMismatch(SteerkitError):
    pass


class EmptySequence(SteerkitError):
    pass


class UnsupportedCombination(SteerkitError):
    pass


class JudgeUnavailable(SteerkitError):
    pass


class UnparseableRating(SteerkitError):
    pass


class EmptySplit(SteerkitError):
    pass


class ConceptSetMismatch(SteerkitError):
    pass


class LayerOutOfRange(SteerkitError):
    pass
