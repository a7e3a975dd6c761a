"""
Utility functions for mimic-icl.
"""

from .progress import TrainingLog, configure_logging, create_progress_hook
from .seeding import substream, substream_seed
from .validators import validate_overrides, validate_seeds, validate_shots, validate_variants

__all__ = [
    "TrainingLog",
    "configure_logging",
    "create_progress_hook",
    "substream",
    "substream_seed",
    "validate_overrides",
    "validate_seeds",
    "validate_shots",
    "validate_variants",
]
