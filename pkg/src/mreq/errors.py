"""Exception types shared across the package."""


class MreqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MreqError, ValueError):
    pass


class EmptyInputError(MreqError, ValueError):
    pass


class InsufficientDataError(MreqError, ValueError):
    pass


class CorruptTokenError(MreqError, ValueError):
    """Raised for out-of-range ids, misplaced pad cells and malformed files."""


class TrainingDivergenceError(MreqError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
