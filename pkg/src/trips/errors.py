"""Exception hierarchy shared by every module of the package."""


class TripsError(Exception):
    """Base class for all errors raised by this package."""


class FactorizationFailure(TripsError, ArithmeticError):
    pass


class DomainError(TripsError, ValueError):
    pass


class ShapeError(TripsError, ValueError):
    pass


class UnknownClass(TripsError, KeyError):
    pass


class DuplicateClass(TripsError, ValueError):
    pass


class EmptyOldClassSet(TripsError, ValueError):
    pass


class EmptyPseudoBatch(TripsError, ValueError):
    pass


class MissingTerm(TripsError, KeyError):
    pass


class InsufficientSamples(TripsError, ValueError):
    pass


class ModelModeError(TripsError, RuntimeError):
    pass


class EmptyAccumulator(TripsError, RuntimeError):
    pass


class NoOldClasses(TripsError, ValueError):
    pass


class InsufficientClasses(TripsError, ValueError):
    pass


class UnknownDomain(TripsError, KeyError):
    pass


class EmptyDomain(TripsError, ValueError):
    pass


class ExhaustedDomain(TripsError, RuntimeError):
    pass


class ParseError(TripsError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DimensionMismatch(ParseError):
    pass


class NoCheckpoints(TripsError, ValueError):
    pass


class EmptyEvaluation(TripsError, ValueError):
    pass


class EmptyTestDomain(TripsError, ValueError):
    pass


class ShapeMismatch(TripsError, ValueError):
    pass


class ConfigError(TripsError, ValueError):
    pass
