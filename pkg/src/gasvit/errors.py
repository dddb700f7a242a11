"""Exception types shared across the package."""


class GasVitError(Exception):
    """Base class for all library errors."""


class DimensionError(GasVitError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(GasVitError, ValueError):
    """A layer or architecture configuration cannot be realized."""


class SpecError(ConfigurationError):
    """An architecture spec or config file is malformed.

    ``field`` names the offending entry, e.g. ``groups[1].heads``.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class BuildError(ConfigurationError):
    """Raised when building a model from an infeasible spec."""


class DivergenceError(GasVitError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss
