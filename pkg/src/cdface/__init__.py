"""Diverse, closure-aware speech-driven facial motion synthesis."""

from cdface.errors import (
    CDFaceError,
    ConfigError,
    ContainerError,
    ContractViolation,
    PartitionError,
)

__version__ = "0.1.0"

__all__ = [
    "CDFaceError",
    "ConfigError",
    "ContainerError",
    "ContractViolation",
    "PartitionError",
]
