import numpy as np
import pytest

from mimic_icl.core.attention import HeadActivations, MimicHeadParams
from mimic_icl.core.errors import ConfigError, DimensionError
from mimic_icl.core.model import PromptContext
from mimic_icl.core.numerics import Tensor, no_grad
from mimic_icl.core.variants import (
    VARIANT_KINDS,
    CombinedIntervention,
    HeadSharingVariant,
    LinearShiftVariant,
    LiveStyleVariant,
    LoraAdapter,
    MimicVariant,
    PatchVariant,
    QuerySharingVariant,
    VariantConfig,
    build_variant,
    fv_extract,
    head_vectors,
    rank_heads,
    sweep_patch_layer,
    tv_apply,
    tv_extract,
)

TOKENS = np.array([[1, 5, 0, 2, 7, 0, 3], [4, 9, 0, 6, 10, 0, 8]])


def demo_contexts(n=4):
    rng = np.random.default_rng(5)
    return [
        PromptContext([rng.integers(1, 12, size=2).tolist() + [0] for _ in range(2)], [int(rng.integers(1, 12))], (1, 1))
        for _ in range(n)
    ]


def test_variant_config_fills_kind_defaults():
    assert VariantConfig(kind="lora").lora_rank == 2
    assert VariantConfig(kind="function_vector").fv_heads == 4
    assert VariantConfig(kind="mimic").to_dict() == {"kind": "mimic"}


def test_variant_config_rejects_foreign_and_unknown():
    with pytest.raises(ConfigError):
        VariantConfig(kind="mimic", lora_rank=4)
    with pytest.raises(ConfigError):
        VariantConfig(kind="prefix_tuning")
    with pytest.raises(ConfigError):
        VariantConfig(kind="lora", lora_rank=0)
    with pytest.raises(ConfigError):
        VariantConfig.from_dict({"kind": "lora", "alpha": 4})


def test_trainable_kinds():
    assert not VariantConfig(kind="task_vector").trainable
    assert not VariantConfig(kind="function_vector").trainable
    assert VariantConfig(kind="live_style").trainable


@pytest.mark.parametrize("kind", VARIANT_KINDS)
def test_neutral_variant_reproduces_base(model, kind):
    with no_grad():
        base = model.forward(TOKENS)
        trace = build_variant(VariantConfig(kind=kind), model, np.random.default_rng(0), neutral=True).eval().forward(TOKENS)
    np.testing.assert_allclose(trace.logits.data, base.logits.data, atol=1e-12, rtol=0)


def test_parameter_counts(model):
    mc = model.config
    count = lambda kind: build_variant(VariantConfig(kind=kind), model).parameter_count()
    assert count("mimic") == mc.mimic_parameter_count()
    assert count("head_sharing_mu") == mc.n_layers * (mc.d_model + 1 + mc.n_heads * mc.d_head)
    assert count("query_sharing_mu") == mc.n_layers * mc.n_heads * (1 + mc.d_head)
    assert count("live_style") == mc.n_layers * (mc.d_model + 1)
    assert count("lora") == mc.n_layers * 4 * 2 * mc.d_model * 2
    assert count("mimic_plus_lora") == count("mimic") + count("lora")
    assert count("task_vector") == 0


def test_query_sharing_starts_at_half(model):
    variant = build_variant(VariantConfig(kind="query_sharing_mu"), model)
    for name, p in variant.parameters().items():
        if name.endswith(".mu"):
            np.testing.assert_array_equal(p.data, 0.5)


def test_mimic_records_magnitude_per_head(model):
    variant = build_variant(VariantConfig(kind="mimic"), model)
    trace = variant.forward(TOKENS)
    mu_tilde = trace.head_stats[0]["mu_tilde"].data
    assert mu_tilde.shape == (2, model.config.n_heads, TOKENS.shape[1])
    assert np.all((mu_tilde > 0) & (mu_tilde < 1))


def test_head_sharing_magnitude_is_shared(model):
    variant = build_variant(VariantConfig(kind="head_sharing_mu"), model)
    mu_tilde = variant.forward(TOKENS).head_stats[1]["mu_tilde"].data
    np.testing.assert_array_equal(mu_tilde[:, 0], mu_tilde[:, 1])


def test_state_arrays_round_trip(model):
    a = build_variant(VariantConfig(kind="linear_shift"), model)
    for p in a.parameters().values():
        p.data = p.data + 0.1
    b = build_variant(VariantConfig(kind="linear_shift"), model)
    b.load_state_arrays(a.state_arrays())
    np.testing.assert_array_equal(a.forward(TOKENS).logits.data, b.forward(TOKENS).logits.data)


def test_load_state_arrays_checks_names_and_shapes(model):
    variant = build_variant(VariantConfig(kind="live_style"), model)
    arrays = variant.state_arrays()
    with pytest.raises(ConfigError):
        variant.load_state_arrays({k: v for k, v in arrays.items() if k != "live.0.scale"})
    arrays["live.0.vector"] = np.zeros(3)
    with pytest.raises(DimensionError):
        variant.load_state_arrays(arrays)


def test_patch_touches_only_last_position_of_its_layer(model):
    vector = np.full(model.config.d_model, 0.25)
    base = model.forward(TOKENS)
    patched = model.forward(TOKENS, PatchVariant("task_vector", 0, vector))
    np.testing.assert_allclose(
        patched.after_ffn[0].data[:, -1] - base.after_ffn[0].data[:, -1], np.broadcast_to(vector, (2, 8)), atol=1e-15
    )
    np.testing.assert_array_equal(patched.after_ffn[0].data[:, :-1], base.after_ffn[0].data[:, :-1])


def test_lora_dropout_only_in_training(model):
    variant = build_variant(VariantConfig(kind="lora", lora_dropout=0.5), model, np.random.default_rng(0))
    for p in variant.parameters().values():
        if p.name.endswith(".B"):
            p.data = np.full(p.shape, 0.1)
    variant.eval()
    np.testing.assert_array_equal(variant.forward(TOKENS).logits.data, variant.forward(TOKENS).logits.data)
    variant.train()
    assert not np.array_equal(variant.forward(TOKENS).logits.data, variant.forward(TOKENS).logits.data)


def test_lora_rank_bound():
    with pytest.raises(DimensionError):
        LoraAdapter(1, 4, 8, 0.0, np.random.default_rng(0))


def test_combined_rejects_duplicate_parameters(model):
    lora = LoraAdapter(2, 8, 2, 0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        CombinedIntervention([lora, lora], "mimic_plus_lora")


def test_patch_layer_bounds(model):
    with pytest.raises(DimensionError):
        build_variant(VariantConfig(kind="task_vector", patch_layer=5), model)


def test_task_vector_extract_and_apply(model):
    demos = demo_contexts()
    vector = tv_extract(model, demos, 1)
    assert vector.shape == (model.config.d_model,)
    tokens = np.array([[3], [4]])
    patched = tv_apply(model, tokens, 1, vector)
    base = model.forward(tokens)
    np.testing.assert_allclose(patched.after_ffn[1].data - base.after_ffn[1].data, np.broadcast_to(vector, (2, 1, 8)), atol=1e-15)


def test_function_vector_sums_selected_heads(model):
    demos = demo_contexts()
    per_head = head_vectors(model, demos)
    assert per_head.shape == (2, 2, 8)
    np.testing.assert_allclose(fv_extract(model, demos, [(0, 1), (1, 0)]), per_head[0, 1] + per_head[1, 0])


def test_head_ranking_and_layer_sweep(model):
    demos = demo_contexts()
    # favour larger patches so the ordering is deterministic
    score = lambda patch: float(np.linalg.norm(patch.vector)) + patch.layer * 1e-3
    ranked = rank_heads(model, demos, 0, score)
    norms = {(l, h): np.linalg.norm(v) for l, row in enumerate(head_vectors(model, demos)) for h, v in enumerate(row)}
    assert ranked[0] == max(norms, key=norms.get)
    best, scores = sweep_patch_layer(model, lambda layer: np.ones(8), score, "task_vector")
    assert best == 1 and len(scores) == 2


def test_extraction_needs_demonstrations(model):
    with pytest.raises(DimensionError):
        tv_extract(model, [PromptContext([], [3], (1, 1))], 0)


def head_acts(n_heads=2, d_head=4, length=3, seed=0, sa=None, log_z2=None):
    rng = np.random.default_rng(seed)
    shape = (1, n_heads, length, d_head)
    return HeadActivations(
        q=Tensor(rng.normal(size=shape)),
        k=Tensor(rng.normal(size=shape)),
        v=Tensor(rng.normal(size=shape)),
        scores=Tensor(np.zeros((1, n_heads, length, length))),
        log_z2=Tensor(rng.normal(size=shape[:3]) if log_z2 is None else np.full(shape[:3], log_z2)),
        sa=Tensor(rng.normal(size=shape) if sa is None else np.full(shape, sa)),
    )


def test_linear_shift_interpolates_between_attention_and_map():
    acts = head_acts(log_z2=0.0)
    variant = LinearShiftVariant(1, 2, 4, gate_bias_init=0.0)
    # zero map, mu~ = 1/2
    np.testing.assert_allclose(variant.shift_heads(0, acts).data, 0.5 * acts.sa.data, atol=1e-15)
    variant.gate[0].f_b.data[:] = 60.0
    variant.h_w[0].data[:] = np.eye(4)
    np.testing.assert_allclose(variant.shift_heads(0, acts).data, acts.q.data, atol=1e-12)


def test_query_sharing_full_magnitude_adds_the_shift():
    acts = head_acts(sa=0.0)
    variant = QuerySharingVariant(1, 2, 4)
    variant.mu[0].data[:] = 1.0
    variant.v[0].data = np.arange(8.0).reshape(2, 4)
    out = variant.shift_heads(0, acts).data
    np.testing.assert_allclose(out, np.broadcast_to(variant.v[0].data[None, :, None, :], out.shape))
    assert np.var(acts.extras["mu_tilde"].data, axis=-1).max() == 0.0


def test_head_sharing_with_one_head_is_mimic():
    rng = np.random.default_rng(2)
    f_w, f_b, v = rng.normal(size=(1, 4)), rng.normal(size=(1,)), rng.normal(size=(1, 4))
    sharing = HeadSharingVariant(1, 1, 4)
    sharing.g_w[0].data, sharing.g_b[0].data, sharing.v[0].data = f_w[0].copy(), np.array(f_b[0]), v.copy()
    mimic = MimicVariant([MimicHeadParams(Tensor(f_w), Tensor(f_b), Tensor(v))])
    acts, twin = head_acts(n_heads=1, seed=3), head_acts(n_heads=1, seed=3)
    np.testing.assert_allclose(sharing.shift_heads(0, acts).data, mimic.shift_heads(0, twin).data, atol=1e-12)
    np.testing.assert_allclose(acts.extras["mu_tilde"].data, twin.extras["mu_tilde"].data, atol=1e-12)


def test_live_style_shift_is_row_independent():
    hidden = Tensor(np.random.default_rng(4).normal(size=(2, 3, 8)))
    silent = LiveStyleVariant(1, 8, scale_init=0.0)
    silent.vector[0].data = np.ones(8)
    np.testing.assert_array_equal(silent.after_ffn(0, hidden).data, hidden.data)
    live = LiveStyleVariant(1, 8, scale_init=0.5)
    live.vector[0].data = np.arange(8.0)
    delta = live.after_ffn(0, hidden).data - hidden.data
    np.testing.assert_allclose(delta, np.broadcast_to(0.5 * np.arange(8.0), delta.shape), atol=1e-12)


def test_task_vector_of_identical_demonstrations_is_their_hidden_state(model):
    demo = PromptContext([[1, 5, 0], [2, 7, 0]], [3], (1, 1))
    vector = tv_extract(model, [demo] * 4, 1)
    tokens = np.concatenate(demo.icd_tokens)
    expected = model.forward(tokens).after_ffn[1].data[0, -1]
    np.testing.assert_allclose(vector, expected, atol=1e-12)
