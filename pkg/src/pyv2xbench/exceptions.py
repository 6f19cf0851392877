"""Custom exceptions for the C-V2X interference game benchmark."""

from typing import Any


class V2XBenchError(Exception):
    """Base exception for all benchmark errors."""

    def __init__(
        self,
        message: str,
        details: dict[str, Any] | None = None,
    ) -> None:
        """Initialize the base exception.

        Args:
            message: Error message
            details: Structured context about the failure (sizes, paths, indices)
        """
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigurationError(V2XBenchError):
    """Exception raised for invalid parameters, config keys or task/algorithm pairs."""

    def __init__(
        self,
        message: str,
        valid_keys: list[str] | None = None,
    ) -> None:
        """Initialize configuration error.

        Args:
            message: Error message
            valid_keys: Keys accepted at the location of the error, if applicable
        """
        details = {"valid_keys": valid_keys} if valid_keys else None
        super().__init__(message, details)
        self.valid_keys = valid_keys or []


class TopologyInfeasibleError(V2XBenchError):
    """Exception raised when a topology cannot satisfy the minimum-gap constraint."""


class DatasetFormatError(V2XBenchError):
    """Exception raised for malformed or truncated dataset files."""

    def __init__(
        self,
        message: str,
        line: int | None = None,
        byte_offset: int | None = None,
    ) -> None:
        """Initialize dataset format error.

        Args:
            message: Error message
            line: 1-based line number of the offending record
            byte_offset: Byte offset of the start of the offending record
        """
        super().__init__(message, {"line": line, "byte_offset": byte_offset})
        self.line = line
        self.byte_offset = byte_offset


class EnvironmentStateError(V2XBenchError):
    """Exception raised for invalid environment transitions (step after done, empty source)."""


class EnumerationLimitError(V2XBenchError):
    """Exception raised when exhaustive search is requested above the enumeration guard."""


class DegenerateBoundsError(V2XBenchError):
    """Exception raised when normalization bounds or equilibrium statistics are degenerate."""


class ShapeMismatchError(V2XBenchError):
    """Exception raised for network input/parameter shape violations."""


class TrainingDivergedError(V2XBenchError):
    """Exception raised when a loss becomes NaN or infinite during training."""


class AggregationError(V2XBenchError):
    """Exception raised when run logs cannot be combined into a result table."""
