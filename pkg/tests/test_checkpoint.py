import json

import numpy as np
import pytest

from mimic_icl.core.checkpoint import FORMAT_VERSION, load_base, load_variant, read_meta, save_base, save_variant
from mimic_icl.core.errors import CheckpointError
from mimic_icl.core.numerics import Tensor
from mimic_icl.core.variants import VariantConfig, build_variant
from mimic_icl.core.verification import tiny_model

TOKENS = np.array([[1, 2, 0, 3, 4, 0, 5]])


def test_base_round_trip_is_bit_identical(tmp_path, model):
    path = save_base(tmp_path / "base.json", model, {"seed": 0})
    loaded = load_base(path)
    assert loaded.checksum() == model.checksum()
    np.testing.assert_array_equal(loaded.forward(TOKENS).logits.data, model.forward(TOKENS).logits.data)
    assert not any(p.requires_grad for p in loaded.parameters().values())
    assert read_meta(path) == {"seed": 0}


def test_missing_base_hints_at_pretraining(tmp_path):
    with pytest.raises(CheckpointError, match="pretrain"):
        load_base(tmp_path / "base.json")


def test_format_version_is_checked(tmp_path, model):
    path = save_base(tmp_path / "base.json", model)
    payload = json.loads(path.read_text())
    payload["format_version"] = FORMAT_VERSION + 1
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError):
        load_base(path)


def test_corrupted_parameters_fail_the_checksum(tmp_path, model):
    path = save_base(tmp_path / "base.json", model)
    payload = json.loads(path.read_text())
    payload["params"]["embed"]["data"][0] += 1.0
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="checksum"):
        load_base(path)


def test_variant_round_trip(tmp_path, model):
    variant = build_variant(VariantConfig(kind="mimic_plus_lora"), model, np.random.default_rng(0))
    for p in variant.parameters().values():
        p.data = p.data + 0.05
    path = save_variant(tmp_path / "v.json", variant, {"k": 2})
    loaded = load_variant(path, model)
    assert loaded.kind == "mimic_plus_lora"
    np.testing.assert_array_equal(loaded.forward(TOKENS).logits.data, variant.eval().forward(TOKENS).logits.data)


def test_patch_variant_keeps_layer_and_vector(tmp_path, model):
    variant = build_variant(VariantConfig(kind="task_vector"), model)
    variant.intervention.layer = 1
    variant.intervention.vector = np.arange(8.0)
    loaded = load_variant(save_variant(tmp_path / "tv.json", variant), model)
    assert loaded.intervention.layer == 1
    np.testing.assert_array_equal(loaded.intervention.vector, np.arange(8.0))


def test_variant_needs_its_base(tmp_path, model):
    path = save_variant(tmp_path / "v.json", build_variant(VariantConfig(kind="mimic"), model))
    other = tiny_model(1)
    with pytest.raises(CheckpointError, match="different base"):
        load_variant(path, other)


def test_wrong_checkpoint_kind(tmp_path, model):
    path = save_base(tmp_path / "base.json", model)
    with pytest.raises(CheckpointError):
        load_variant(path, model)


def test_unreadable_checkpoint(tmp_path):
    path = tmp_path / "base.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_base(path)
