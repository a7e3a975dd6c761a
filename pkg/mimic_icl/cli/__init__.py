"""
Command-line interfaces for mimic-icl.
"""

from .run import cli as run_cli
from .ablate import main as ablate_main
from .config_manager import cli as config_cli

__all__ = ["run_cli", "ablate_main", "config_cli"]
