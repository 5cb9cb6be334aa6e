"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller broke a documented precondition (shapes, weights, counts)."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain (e.g. nonpositive variance)."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(ValueError):
    """An invalid configuration field."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read back into the requested state."""
