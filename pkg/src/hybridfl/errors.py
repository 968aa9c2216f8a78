"""Exception types shared across the package."""


class HybridFLError(Exception):
    pass


class ShapeError(HybridFLError, ValueError):
    pass


class PreconditionError(HybridFLError, ValueError):
    pass


class TrainingDivergence(HybridFLError, ArithmeticError):
    """Raised when a non-finite loss shows up during SGD."""

    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class SerializationError(HybridFLError, ValueError):
    pass


class IntegrityError(HybridFLError):
    pass


class TransportError(HybridFLError):
    def __init__(self, message, round_index=None):
        if round_index is not None:
            message = f"round {round_index}: {message}"
        super().__init__(message)
        self.round_index = round_index


class ContractError(HybridFLError):
    """A public-contract call was rejected."""


class AccessDenied(HybridFLError, PermissionError):
    pass


class ConfigError(HybridFLError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
