"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class EmptySourceError(RuntimeError):
    """Raised when sampling from a buffer that holds no transitions."""


class ConfigurationError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class DegenerateReferenceError(ValueError):
    """Expert and random reference returns coincide, so scores cannot be normalized."""
