"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed input data: bad files, violated invariants, unusable splits."""


class NumericalError(ArithmeticError):
    """Non-finite values or degenerate numerical situations."""
