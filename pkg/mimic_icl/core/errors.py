"""
Exception hierarchy for mimic-icl.

Library code raises these; the CLI maps them to exit codes.
"""

from typing import Any, Dict, Optional


class MimicError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(MimicError, ValueError):
    """Shapes of the operands do not fit the operation."""


class ConfigError(MimicError, ValueError):
    """Experiment configuration is malformed or inconsistent."""


class CheckpointError(MimicError):
    """A checkpoint is missing, unreadable or of an unknown format version."""


class NonFiniteError(MimicError, ArithmeticError):
    """A loss or gradient became NaN/inf."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class VerificationError(MimicError):
    """A verification suite found a violated identity or gradient."""
