"""Exception types shared across the package."""


class ArgMambaError(Exception):
    pass


class ConfigError(ArgMambaError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(ArgMambaError, ValueError):
    """Tensor dimensions do not agree."""


class DomainError(ArgMambaError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ResourceError(ArgMambaError, RuntimeError):
    """A configured memory/size budget would be exceeded."""


class UndefinedMetricError(ArgMambaError, ValueError):
    pass


class ParseError(ArgMambaError, ValueError):
    """Malformed raster file."""

    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset
