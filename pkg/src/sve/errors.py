"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConvergenceError(NumericError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FormatError(ValueError):
    """A persisted file has a bad magic, version, or checksum."""


class LengthError(FormatError):
    """A persisted file is truncated."""


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class DependencyError(RuntimeError):
    """A stage needs an artifact (e.g. a checkpoint) that does not exist."""


class CapabilityError(TypeError):
    """The object does not support the requested operation."""
