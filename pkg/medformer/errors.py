"""Exceptions raised by the medformer package."""

from __future__ import annotations


class MedFormerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MedFormerError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(MedFormerError, ValueError):
    """A configuration record is invalid."""

    def __init__(self, message: str, field: str | None = None) -> None:
        """Store the offending field next to the message."""
        super().__init__(message)
        self.field = field


class DataError(MedFormerError, ValueError):
    """Input data violates a documented precondition."""


class DegenerateTokenError(DataError):
    """A semantic token has zero norm."""

    def __init__(self, message: str, index: int) -> None:
        """Store the index of the degenerate token."""
        super().__init__(message)
        self.index = index


class FormatError(MedFormerError, ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int) -> None:
        """Store the byte offset at which decoding failed."""
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ContractError(MedFormerError, RuntimeError):
    """A caller broke the contract of a verification harness."""


class NonFiniteGradientError(MedFormerError, FloatingPointError):
    """A parameter gradient contains NaN or infinity."""

    def __init__(self, name: str) -> None:
        """Name the parameter whose gradient is not finite."""
        super().__init__(f"Non-finite gradient for parameter '{name}'")
        self.name = name


class TrainingAborted(MedFormerError, RuntimeError):
    """Training stopped before completion."""
