class ParameterError(ValueError):
    """Invalid argument value (out of range, wrong count, ...)."""


class ShapeError(ValueError):
    """Tensor or image dimensions do not agree."""


class StateError(RuntimeError):
    """Operation not allowed in the current object state."""


class ManifestError(ValueError):
    """Malformed or inconsistent manifest file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConfigError(ValueError):
    """Run configuration is invalid."""
