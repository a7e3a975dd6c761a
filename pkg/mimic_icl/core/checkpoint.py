"""
JSON checkpoints for the base model and trained variants.

Float arrays are written through ``float.__repr__`` so a save/load round trip
is bit-identical.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, TransformerModel
from .numerics import Tensor
from .variants import VariantConfig, VariantModel, build_variant

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _encode(arrays: Dict[str, np.ndarray]) -> Dict[str, Dict[str, Any]]:
    return {
        name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
        for name, a in arrays.items()
    }


def _decode(entries: Dict[str, Dict[str, Any]]) -> Dict[str, np.ndarray]:
    return {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in entries.items()
    }


def _read(path: Path, kind: str, hint: str) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{kind} checkpoint not found at {path}; {hint}")
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise CheckpointError(f"could not read {kind} checkpoint {path}: {e}") from e
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has checkpoint format {version!r}, expected {FORMAT_VERSION}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload


def _write(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f)
    tmp.replace(path)
    logger.debug("wrote checkpoint %s", path)
    return path


def save_base(path: Path, model: TransformerModel, meta: Optional[Dict] = None) -> Path:
    return _write(path, {
        "format_version": FORMAT_VERSION,
        "kind": "base",
        "model_config": model.config.to_dict(),
        "checksum": model.checksum(),
        "params": _encode({name: p.data for name, p in model.parameters().items()}),
        "meta": meta or {},
    })


def load_base(path: Path) -> TransformerModel:
    payload = _read(path, "base", "run `mimic-icl pretrain` first")
    try:
        config = ModelConfig.from_dict(payload["model_config"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: {e}") from e
    params = {name: Tensor(a, name=name) for name, a in _decode(payload["params"]).items()}
    model = TransformerModel(config, params)
    if payload.get("checksum") and model.checksum() != payload["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    return model.freeze()


def save_variant(path: Path, variant: VariantModel, meta: Optional[Dict] = None) -> Path:
    return _write(path, {
        "format_version": FORMAT_VERSION,
        "kind": "variant",
        "variant_config": variant.config.to_dict(),
        "base_checksum": variant.base.checksum(),
        "arrays": _encode(variant.state_arrays()),
        "meta": meta or {},
    })


def load_variant(path: Path, model: TransformerModel) -> VariantModel:
    payload = _read(path, "variant", "run `mimic-icl train` first")
    if payload.get("base_checksum") != model.checksum():
        raise CheckpointError(f"{path} was trained on a different base model")
    variant = build_variant(VariantConfig.from_dict(payload["variant_config"]), model)
    variant.load_state_arrays(_decode(payload["arrays"]))
    return variant.eval()


def read_meta(path: Path) -> Dict[str, Any]:
    with open(path, "r") as f:
        return json.load(f).get("meta", {})
