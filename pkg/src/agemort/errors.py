"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid grid, parameter, or run configuration."""


class ParseError(ValueError):
    """Malformed input data file."""


class NumericalError(ArithmeticError):
    """A numerical routine failed."""


class QuadratureError(NumericalError):
    """Numerical quadrature failed to reach its tolerance."""


class PropagationError(NumericalError):
    """Ensemble propagation produced non-finite values."""
