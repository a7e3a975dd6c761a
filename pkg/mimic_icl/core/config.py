"""
Experiment configuration for mimic-icl.

One JSON document holds every section (model, pretrain, train, variant,
task, eval) plus the output directory and root seed. Values from the file
override ``DEFAULTS``; command-line flags override the file.
"""

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError
from .evaluation import EvalConfig
from .model import ModelConfig
from .tasks import TaskConfig
from .training import PretrainConfig, TrainConfig
from .variants import VariantConfig

SCHEMA_VERSION = 1
OUTPUT_ENV = "MIMIC_ICL_OUTPUT"
SECTIONS = ("model", "pretrain", "train", "variant", "task", "eval")


def _section_defaults(cls, drop=()) -> Dict[str, Any]:
    data = {k: v for k, v in cls().__dict__.items() if k not in drop}
    return json.loads(json.dumps(data, default=lambda o: o.__dict__))


class Config:
    """Configuration manager for mimic-icl experiments."""

    DEFAULTS = {
        "schema_version": SCHEMA_VERSION,
        "output_directory": str(Path.home() / "mimic-icl" / "outputs"),
        "seed": 0,
        # the root seed replaces model.seed
        "model": _section_defaults(ModelConfig, drop=("seed",)),
        "pretrain": _section_defaults(PretrainConfig),
        "train": _section_defaults(TrainConfig, drop=("variant", "seed")),
        "variant": {
            "kind": "mimic",
            "lora_rank": None,
            "lora_dropout": None,
            "live_scale_init": None,
            "gate_bias_init": None,
            "patch_layer": None,
            "fv_heads": None,
        },
        "task": _section_defaults(TaskConfig),
        "eval": _section_defaults(EvalConfig),
    }

    def __init__(self, config_path: Optional[Path] = None, use_user_file: bool = True):
        """
        Initialize configuration.

        Args:
            config_path: Optional path to a config document. If not provided,
                         ~/.mimic-icl/config.json is read when it exists and
                         ``use_user_file`` is set.
        """
        if config_path is None:
            self.config_path = Path.home() / ".mimic-icl" / "config.json"
            self._explicit = False
            read_file = use_user_file
        else:
            self.config_path = Path(config_path)
            self._explicit = True
            read_file = True

        self._config = copy.deepcopy(self.DEFAULTS)
        env_output = os.environ.get(OUTPUT_ENV)
        if env_output:
            self._config["output_directory"] = env_output
        if read_file:
            self.load()

    def load(self) -> None:
        """Load configuration from file, rejecting unknown keys and foreign schemas."""
        if not self.config_path.exists():
            if self._explicit:
                raise ConfigError(f"config file not found: {self.config_path}")
            return
        try:
            with open(self.config_path, "r") as f:
                user_config = json.load(f)
        except (json.JSONDecodeError, IOError) as e:
            raise ConfigError(f"could not load config file {self.config_path}: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigError(f"{self.config_path}: top level must be an object")
        version = user_config.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{self.config_path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        self.update(user_config)

    def save(self) -> None:
        """Save current configuration to file."""
        try:
            self.config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_path, "w") as f:
                json.dump(self._config, f, indent=2)
        except IOError as e:
            raise ConfigError(f"could not save config file {self.config_path}: {e}") from e

    @staticmethod
    def _split(key: str):
        parts = key.split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"invalid configuration key: {key}")
        return parts

    def _default_for(self, key: str) -> Any:
        node = self.DEFAULTS
        for part in self._split(key):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"invalid configuration key: {key}")
            node = node[part]
        return node

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value by (dotted) key."""
        node = self._config
        for part in self._split(key):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value by (dotted) key, checking its type against the default."""
        default = self._default_for(key)
        if isinstance(default, dict):
            raise ConfigError(f"{key} is a section; set its keys individually")
        self._check_type(key, default, value)
        parts = self._split(key)
        if len(parts) == 1:
            self._config[key] = value
        else:
            self._config[parts[0]][parts[1]] = value

    @staticmethod
    def _check_type(key: str, default: Any, value: Any) -> None:
        if default is None or value is None:
            if value is not None and not isinstance(value, (int, float)):
                raise ConfigError(f"{key} expects a number or null, got {value!r}")
            return
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")

    def update(self, updates: Dict[str, Any]) -> None:
        """Update multiple values; nested sections merge key by key."""
        for key, value in updates.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key} must be an object")
                for sub, sub_value in value.items():
                    self.set(f"{key}.{sub}", sub_value)
            else:
                self.set(key, value)

    def reset(self, key: Optional[str] = None) -> None:
        """Reset configuration (or one key or section) to defaults."""
        if key is None:
            self._config = copy.deepcopy(self.DEFAULTS)
            return
        default = copy.deepcopy(self._default_for(key))
        parts = self._split(key)
        if len(parts) == 1:
            self._config[key] = default
        else:
            self._config[parts[0]][parts[1]] = default

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON document without its output directory, first 12 hex digits."""
        body = {k: v for k, v in self._config.items() if k != "output_directory"}
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def get_output_path(self) -> Path:
        """Get the output directory path, creating it if needed."""
        output_dir = Path(self._config["output_directory"]).expanduser()
        output_dir.mkdir(parents=True, exist_ok=True)
        return output_dir

    # -- typed views -----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self._config["seed"]

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self._config["model"], "seed": self.seed})

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig.from_dict(self._config["pretrain"])

    def variant_config(self) -> VariantConfig:
        return VariantConfig.from_dict({k: v for k, v in self._config["variant"].items() if v is not None})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self._config["train"], "seed": self.seed, "variant": self.variant_config()})

    def task_config(self) -> TaskConfig:
        return TaskConfig.from_dict(self._config["task"])

    def eval_config(self) -> EvalConfig:
        return EvalConfig.from_dict(self._config["eval"])

    def validate(self) -> None:
        """Build every typed view so a bad value fails before any run starts."""
        self.model_config()
        self.pretrain_config()
        self.train_config()
        self.task_config()
        self.eval_config()
        if self.task_config().alphabet_size > self.model_config().vocab_size - 1:
            raise ConfigError("task.alphabet_size does not fit model.vocab_size")
        if self.pretrain_config().alphabet_size > self.model_config().vocab_size - 1:
            raise ConfigError("pretrain.alphabet_size does not fit model.vocab_size")

    def __repr__(self) -> str:
        return f"Config(path={self.config_path}, hash={self.config_hash()})"


def load_config(config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """Defaults, then the config file, then dotted-key overrides; validated."""
    cfg = Config(config_path)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    cfg.validate()
    return cfg
