import math

import numpy as np
import pytest

from mimic_icl.core.errors import ConfigError, DimensionError
from mimic_icl.core.evaluation import (
    EvalConfig,
    EvalReport,
    accuracy,
    alignment_distance_report,
    build_eval_set,
    evaluate_accuracy,
    evaluate_mode,
    held_out_icl_accuracy,
    latency_bench,
    mode_predictor,
    order_sensitivity,
    patched_scorer,
)
from mimic_icl.core.tasks import TaskData
from mimic_icl.core.variants import PatchVariant, VariantConfig, build_variant


@pytest.fixture
def task_data(task, samples):
    return TaskData(task, samples, samples)


@pytest.fixture
def eval_set(samples):
    return build_eval_set(samples, samples, 2, np.random.default_rng(0))


def test_accuracy_basics():
    assert accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)
    with pytest.raises(DimensionError):
        accuracy([1, 2], [1, 2, 3])


def test_eval_set_token_counts(eval_set):
    assert len(eval_set) == 8
    assert eval_set.tokens_per_query("k_shot_icl") == 2 * 3 + 1
    assert eval_set.tokens_per_query("zero_shot") == 1
    assert eval_set.tokens_per_query("mimic") == eval_set.tokens_per_query("zero_shot")
    assert eval_set.icl_tokens().shape == (8, 7)


def test_oracle_predictor_scores_one(model, task_data):
    report = evaluate_accuracy(
        model, task_data, "k_shot_icl", 2, 8, np.random.default_rng(0),
        predictor=lambda es: es.answers.copy(), seed=3,
    )
    assert report.accuracy == 1.0
    assert report.seed == 3 and report.n == 8


def test_untrained_model_is_near_chance(model, task_data):
    report = evaluate_accuracy(model, task_data, "zero_shot", 2, 8, np.random.default_rng(0))
    assert 0.0 <= report.accuracy <= 0.5
    assert report.tokens == 1


def test_mode_predictor_needs_variant(model):
    with pytest.raises(ConfigError):
        mode_predictor(model, "mimic")


def test_icl_distance_to_itself_is_zero(model, eval_set):
    report = alignment_distance_report(model, eval_set, "k_shot_icl")
    np.testing.assert_allclose(report["l2"], 0.0, atol=1e-12)
    np.testing.assert_allclose(report["cosine"], 1.0, atol=1e-12)


def test_neutral_variant_distance_matches_zero_shot(model, eval_set):
    variant = build_variant(VariantConfig(kind="mimic"), model)
    zero = alignment_distance_report(model, eval_set, "zero_shot")
    shifted = alignment_distance_report(model, eval_set, "mimic", variant)
    np.testing.assert_allclose(shifted["l2"], zero["l2"], atol=1e-12)


def test_evaluate_mode_report(model, eval_set):
    report = evaluate_mode(model, eval_set, "k_shot_icl", seed=1, rng=np.random.default_rng(0), order_permutations=2)
    assert len(report.l2_per_layer) == model.config.n_layers
    assert 0.0 <= report.order_sensitivity <= 1.0
    row = report.row()
    assert row["mode"] == "k_shot_icl" and row["k"] == 2
    assert math.isnan(row["latency_s"])
    assert len(row["l2_layers"].split()) == model.config.n_layers


def test_order_sensitivity_single_shot_is_zero(model, samples):
    one_shot = build_eval_set(samples, samples, 1, np.random.default_rng(0))
    assert order_sensitivity(model, one_shot, np.random.default_rng(0)) == 0.0


def test_latency_bench_rows(model, eval_set):
    variant = build_variant(VariantConfig(kind="mimic"), model)
    rows = latency_bench(model, eval_set, variant, repeats=1)
    assert [r["mode"] for r in rows] == ["k_shot_icl", "zero_shot", "mimic"]
    assert rows[0]["tokens"] == 7 and rows[2]["tokens"] == rows[1]["tokens"] == 1
    assert rows[0]["speedup"] == 1.0
    assert all(r["latency_s"] > 0 for r in rows)


def test_patched_scorer_with_zero_patch_matches_zero_shot(model, eval_set):
    score = patched_scorer(model, eval_set)
    zero = accuracy(mode_predictor(model, "zero_shot")(eval_set), eval_set.answers)
    assert score(PatchVariant("task_vector", 0, np.zeros(8))) == zero


def test_held_out_icl_accuracy_is_a_fraction(model):
    acc = held_out_icl_accuracy(model, "modular_offset", 6, 3, 10, np.random.default_rng(0))
    assert 0.0 <= acc <= 1.0


def test_eval_report_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        EvalReport("zero_shot", 1, 0, 1.5, 10, 1)


def test_eval_config_validation():
    assert "zero_shot" in EvalConfig().variants
    with pytest.raises(ConfigError):
        EvalConfig(variants=["mimic", "prompt_tuning"])
    with pytest.raises(ConfigError):
        EvalConfig(align_points=["after_norm"])
    with pytest.raises(ConfigError):
        EvalConfig(shots=[0])
