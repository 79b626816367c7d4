"""
Exception hierarchy shared by every package in the pipeline.

Each error carries the process exit code the CLI reports for it.
"""

from typing import Any, Dict, Optional


class SplatRestoreError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class InputError(SplatRestoreError, ValueError):
    """Invalid arguments, files or configuration."""

    exit_code = 3


class ShapeError(InputError):
    """Tensor shapes incompatible with the requested operation."""


class FormatError(InputError):
    """A file could not be parsed.

    Args:
        message: What went wrong
        offset: Byte offset of the failure, when known
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CorruptStreamError(FormatError):
    """A coded scene failed its magic, version or checksum test."""


class NumericalError(SplatRestoreError, ArithmeticError):
    """A computation produced non-finite values.

    Args:
        message: What went wrong
        diagnostics: Values useful for post-mortem (last report, iteration, ...)
    """

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
