"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class NoConsensusError(RuntimeError):
    pass


class EmptyBufferError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    pass


class VisibilityError(RuntimeError):
    pass


class ContractViolationError(RuntimeError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
