"""Exception types shared across the package.

The CLI maps each family to an exit code (see ``ocnet.cli``).
"""


class OCNError(Exception):
    """Base class for package errors."""


class ConfigError(OCNError, ValueError):
    """Invalid configuration or argument values."""


class ShapeError(OCNError, ValueError):
    """Array dimensions do not match what an operation expects."""


class StateError(OCNError, RuntimeError):
    """An object was used out of order (e.g. backward on stale activations)."""


class CorruptFileError(OCNError, OSError):
    """A file on disk is truncated or has an unreadable header."""


class NumericError(OCNError, ArithmeticError):
    """Non-finite values appeared in a computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateProbeError(ConfigError):
    """A probe cannot be trained because its training labels have one class."""
