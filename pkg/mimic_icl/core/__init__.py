"""
Core functionality for mimic-icl.
"""

from .config import Config, load_config
from .errors import CheckpointError, ConfigError, DimensionError, MimicError, NonFiniteError, VerificationError
from .model import ModelConfig, TransformerModel
from .pipeline import Experiment
from .variants import VARIANT_KINDS, VariantConfig, VariantModel, build_variant

__all__ = [
    "Config",
    "load_config",
    "MimicError",
    "DimensionError",
    "ConfigError",
    "CheckpointError",
    "NonFiniteError",
    "VerificationError",
    "ModelConfig",
    "TransformerModel",
    "Experiment",
    "VARIANT_KINDS",
    "VariantConfig",
    "VariantModel",
    "build_variant",
]
