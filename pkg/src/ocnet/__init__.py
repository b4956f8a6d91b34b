"""Object-contrastive embedding learning on synthetic multi-object scenes."""

from .errors import (
    ConfigError,
    CorruptFileError,
    DegenerateProbeError,
    NumericError,
    OCNError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptFileError",
    "DegenerateProbeError",
    "NumericError",
    "OCNError",
    "ShapeError",
    "StateError",
]
