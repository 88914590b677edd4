"""Exception types shared across the package."""


class DAFError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DAFError, ValueError):
    pass


class FormatError(DAFError, ValueError):
    pass


class SchemaError(DAFError, ValueError):
    pass


class ConfigurationError(DAFError, ValueError):
    """Raised for invalid or inconsistent configuration.

    ``key`` carries the dotted path of the offending config entry when known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ShapeError(DAFError, ValueError):
    pass


class TrainingError(DAFError, RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        if checkpoint is not None:
            message = f"{message} (last good checkpoint: {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateBatchError(DAFError, ValueError):
    """A stage has no normal positions left to distill on."""


class UndefinedMetricError(DAFError, ValueError):
    pass


class IndexingError(DAFError, ValueError):
    pass


class MissingArtifactError(DAFError, FileNotFoundError):
    """A file another command should have produced is absent."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message}: expected {path}")
        self.path = path
