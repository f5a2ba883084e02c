"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class CorruptFileError(IOError):
    pass


class ConsistencyError(RuntimeError):
    pass


class NumericDivergenceError(RuntimeError):
    """Raised when a computation produces non-finite values.

    ``step`` carries the sampler or trainer step index at which it happened.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
