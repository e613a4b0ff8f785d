class ConfigError(ValueError):
    """Invalid configuration value or file."""


class DataError(ValueError):
    """Input data violates a precondition."""


class TrainingDivergence(RuntimeError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class StageOrderError(RuntimeError):
    """A pipeline stage was invoked before the stage that produces its inputs."""
