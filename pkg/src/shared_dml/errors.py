"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A configuration value violates its invariant."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DimensionError(ValueError):
    pass


class DegenerateEmbeddingError(ArithmeticError):
    """A linear head produced the zero vector, which has no direction."""


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message: str, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class SamplingError(ValueError):
    pass
