"""Shared exception types, mapped to CLI exit codes (input=1, internal=2)."""


class ConfigurationError(ValueError):
    """A config value is invalid or inconsistent."""


class InputError(ValueError):
    """A data input violates a documented precondition."""


class ParseError(ValueError):
    """A file could not be parsed; message carries location info."""


class UsageError(RuntimeError):
    """An API was called outside its contract."""


class ShapeError(UsageError):
    """Tensor shapes are incompatible; message names the op."""
