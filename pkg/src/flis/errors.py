"""Exception types raised across the simulator."""


class FlisError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FlisError, ValueError):
    """Input dimensions do not match the model or each other."""


class EmptyInputError(FlisError, ValueError):
    pass


class TrainingDivergenceError(FlisError, ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite gradient at SGD step {step}")


class PartitionError(FlisError, ValueError):
    pass


class DegenerateMatrixError(FlisError, ValueError):
    pass


class AggregationError(FlisError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class MetricUnavailableError(FlisError, ValueError):
    pass


class ConfigError(FlisError, ValueError):
    pass
