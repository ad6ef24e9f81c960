"""Exception hierarchy shared by all modules."""


class ConjTTAError(Exception):
    """Base class for all package errors."""


class ConfigError(ConjTTAError, ValueError):
    """Invalid configuration: unknown kind, bad hyperparameter, bad key."""


class DimensionError(ConjTTAError, ValueError):
    """Shapes of inputs do not match."""


class ContractError(ConjTTAError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(ConjTTAError, ArithmeticError):
    """A numerical routine failed (non-finite value, singular system)."""


class DivergenceError(NumericalError):
    """Training or adaptation produced a non-finite objective or parameter."""


class DomainError(NumericalError):
    """Argument outside the domain of a function (e.g. off the simplex)."""


class ParseError(ConjTTAError, ValueError):
    """A data file could not be parsed."""
