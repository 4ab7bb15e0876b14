"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of a function (log of 0, z <= 0, ...)."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class DefinitenessError(ValueError):
    """A matrix required to be symmetric positive definite is not."""


class NumericError(ArithmeticError):
    """A numerical routine failed to converge or produced non-finite output."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class ParseError(ValueError):
    """A serialized file could not be parsed."""


class ValidationError(ValueError):
    """A parsed file violates its declared extents or invariants."""
