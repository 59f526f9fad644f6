"""Driver error types."""


class DriverError(Exception):
    """Base class for driver failures."""


class TrainingDataError(DriverError):
    """A training line violates the chat-JSONL contract."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelLoadError(DriverError):
    """The configured base model could not be constructed or fetched."""
