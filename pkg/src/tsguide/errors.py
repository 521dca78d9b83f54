"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument or configuration value is outside its valid range."""


class ShapeError(ValueError):
    """Array shapes do not line up."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""
