class ConfigurationError(ValueError):
    """Invalid experiment, problem or discretization parameter."""


class OutOfDomainError(ValueError):
    """A point lies outside every mesh element."""


class NumericalFailure(RuntimeError):
    """Non-finite loss or gradient, or a failed linear solve."""
