"""Exception hierarchy shared across the package."""


class LoralabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LoralabError):
    """Operands have incompatible dimensions."""


class DomainError(LoralabError):
    """A numeric argument is outside its valid domain (e.g. negative variance)."""


class DegenerateInputError(LoralabError):
    """Input is numerically rank deficient where full rank is required."""


class ConditioningError(LoralabError):
    """A matrix that must be positive definite is not."""


class InsufficientDataError(LoralabError):
    """Too few samples for the requested statistic."""


class UsageError(LoralabError):
    """API misuse: wrong call order, missing state, unknown identifier."""


class FreezeViolationError(UsageError):
    """Attempted to mutate a frozen adapter stack."""


class ProtocolError(UsageError):
    """Continual-learning driver called out of order."""


class DataError(LoralabError):
    """Invalid sample data (e.g. label outside the active head)."""


class ParseError(LoralabError):
    """A feature file does not conform to its declared format."""


class ConfigError(LoralabError):
    """Run configuration is malformed."""
