"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class LabelError(ValueError):
    """A supervision label is outside its valid domain."""


class InputError(ValueError):
    """Model or pipeline input violates its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint cannot be read or does not match the target parameters."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
