class InvalidStateError(RuntimeError):
    """An operation was applied to a state that cannot support it."""


class NumericError(ArithmeticError):
    """A probability row or gradient contained non-finite values."""


class ConfigError(ValueError):
    """Configuration failed validation; ``keys`` names every offending key."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class CheckpointVersionError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass
