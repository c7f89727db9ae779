class ImopError(Exception):
    pass


class ValidationError(ImopError, ValueError):
    """Bad input: dimensions, parameter outside its space, unknown fixture."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class NumericalError(ImopError, RuntimeError):
    """A solver failed to certify a result."""

    def __init__(self, message, weight_index=None, details=None):
        super().__init__(message)
        self.weight_index = weight_index
        self.details = details or {}


class NotFoundError(ValidationError):
    """A fixture, config file or stored run does not exist."""
