"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Shapes, masks or other arguments violate an operation's preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in an intermediate result."""


class ConfigError(ValueError):
    """Experiment configuration or dataset is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ClientDivergedError(RuntimeError):
    """A client's local loss became non-finite; its update is discarded."""
