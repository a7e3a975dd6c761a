#!/usr/bin/env python3
"""
mimic-icl

Learned attention shift vectors that let a frozen transformer answer
zero-shot the way it answers with in-context demonstrations.
"""

__version__ = "0.1.0"

# Import main components for easier access
from .core.config import Config, load_config
from .core.model import ModelConfig, TransformerModel
from .core.variants import VariantConfig, VariantModel, build_variant
from .core.pipeline import Experiment
from .cli.run import cli
from .cli.ablate import main as ablate_main
from .cli.config_manager import cli as config_cli

__all__ = [
    "Config",
    "load_config",
    "ModelConfig",
    "TransformerModel",
    "VariantConfig",
    "VariantModel",
    "build_variant",
    "Experiment",
    "cli",
    "ablate_main",
    "config_cli",
    "__version__",
]
