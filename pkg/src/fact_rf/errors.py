"""Exception types shared across the package."""


class FactError(Exception):
    """Base class for package errors."""


class InvalidInput(FactError, ValueError):
    pass


class DimensionMismatch(InvalidInput):
    pass


class DegenerateVariance(FactError, ArithmeticError):
    """The self-normalizing variance estimate is zero (constant feature or residual)."""


class PartitionTooSmall(InvalidInput):
    pass


class EmptyOob(FactError):
    """Too many rows have no out-of-bag trees."""


class StrataTooSmall(InvalidInput):
    pass
