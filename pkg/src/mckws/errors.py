"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or combination (exit code 2)."""


class DataError(ValueError):
    """Missing or unusable corpus data (exit code 3)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (exit code 4)."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
