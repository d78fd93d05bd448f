"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class StateError(RuntimeError):
    """An operation was called out of order."""


class DegenerateDataError(ValueError):
    """The data cannot support the requested fit."""
