"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or missing configuration (parameters, bounds, config files)."""


class ParseError(ValueError):
    """A dataset or config file does not conform to its format."""


class NumericalError(ArithmeticError):
    """A non-finite or otherwise invalid value appeared in a computation."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""
