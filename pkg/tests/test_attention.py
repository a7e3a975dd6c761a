import math

import numpy as np
import pytest

from mimic_icl.core.attention import (
    AttentionWeights,
    MimicHeadParams,
    SegmentedKeys,
    decomposed_icl_sa,
    mimic_sa,
    mu,
    multi_head_forward,
    partition_terms,
    scaled_scores,
    standard_sa,
)
from mimic_icl.core.errors import DimensionError
from mimic_icl.core.numerics import Tensor


def naive_sa(q, keys, values):
    scores = [float(np.dot(q, k)) / math.sqrt(len(q)) for k in keys]
    top = max(scores)
    weights = [math.exp(s - top) for s in scores]
    total = sum(weights)
    out = np.zeros(values.shape[1])
    for w, v in zip(weights, values):
        out += w / total * v
    return out


def head_params(f_w, f_b, v):
    return MimicHeadParams(Tensor(f_w), Tensor(f_b), Tensor(v))


def test_scaled_scores_examples():
    np.testing.assert_array_equal(scaled_scores(np.zeros(3), np.ones((2, 3))).data, [0.0, 0.0])
    np.testing.assert_allclose(scaled_scores([2.0], [[3.0]]).data, [6.0])
    rng = np.random.default_rng(0)
    q, keys = rng.normal(size=4), rng.normal(size=(3, 4))
    np.testing.assert_allclose(scaled_scores(2.5 * q, keys).data, 2.5 * scaled_scores(q, keys).data)


def test_scaled_scores_shape_errors():
    with pytest.raises(DimensionError):
        scaled_scores(np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        scaled_scores(np.zeros(3), np.zeros((0, 3)))


def test_standard_sa_uniform_and_singleton():
    values = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(standard_sa(np.zeros(2), np.ones((2, 2)), values).data, [2.0, 4.0])
    np.testing.assert_allclose(standard_sa([1.0, 0.5], [[0.3, 0.1]], [[7.0, -1.0]]).data, [7.0, -1.0])


def test_standard_sa_matches_naive_oracle():
    rng = np.random.default_rng(1)
    q, keys, values = rng.normal(size=5), rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    np.testing.assert_allclose(standard_sa(q, keys, values).data, naive_sa(q, keys, values), atol=1e-12)


def test_standard_sa_row_mismatch():
    with pytest.raises(DimensionError):
        standard_sa(np.zeros(2), np.zeros((3, 2)), np.zeros((2, 2)))


def test_partition_terms_zero_scores():
    log_z1, log_z2 = partition_terms(np.zeros(2), np.ones((2, 2)), np.ones((3, 2)))
    assert log_z1.item() == pytest.approx(math.log(2.0))
    assert log_z2.item() == pytest.approx(math.log(3.0))
    none, _ = partition_terms(np.zeros(2), None, np.ones((3, 2)))
    assert none is None


def test_partition_terms_match_naive_sum():
    rng = np.random.default_rng(2)
    q, k_demo, k_query = rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    log_z1, log_z2 = partition_terms(q, k_demo, k_query)
    naive = np.sum(np.exp(np.concatenate([k_demo, k_query]) @ q / 2.0))
    assert math.exp(log_z1.item()) + math.exp(log_z2.item()) == pytest.approx(naive, rel=1e-12)


def test_mu_examples():
    assert mu(np.zeros(2), np.ones((2, 2)), np.ones((3, 2))).item() == pytest.approx(0.4)
    assert mu(np.zeros(2), None, np.ones((3, 2))).item() == 0.0
    assert mu(np.zeros(2), np.zeros((0, 2)), np.ones((3, 2))).item() == 0.0


def test_mu_increases_under_demonstration_boost():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    k_demo, k_query = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    boosted = k_demo + 0.1 * 2.0 * q / float(q @ q)
    assert mu(q, boosted, k_query).item() > mu(q, k_demo, k_query).item()


def test_decomposition_hand_example():
    report = decomposed_icl_sa([0.0], [[0.0], [0.0]], [[4.0], [2.0]], [[0.0]], [[0.0]])
    assert report.mu == pytest.approx(2.0 / 3.0)
    np.testing.assert_allclose(report.sa_icd, [3.0])
    np.testing.assert_allclose(report.sa_query, [0.0])
    np.testing.assert_allclose(report.combined, [2.0])
    np.testing.assert_allclose(report.full_reference, [2.0])
    assert report.max_abs_diff <= 1e-12


def test_decomposition_without_demonstrations():
    rng = np.random.default_rng(4)
    k_query, v_query = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    report = decomposed_icl_sa(rng.normal(size=4), None, None, k_query, v_query)
    assert report.mu == 0.0
    np.testing.assert_array_equal(report.combined, report.sa_query)
    np.testing.assert_allclose(report.full_reference, report.sa_query, atol=1e-15)


def test_decomposition_identity_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        l_d, l_q, d_h = rng.integers(1, 17), rng.integers(1, 9), rng.integers(2, 33)
        report = decomposed_icl_sa(
            rng.normal(size=d_h),
            rng.normal(size=(l_d, d_h)), rng.normal(size=(l_d, d_h)),
            rng.normal(size=(l_q, d_h)), rng.normal(size=(l_q, d_h)),
        )
        assert report.max_abs_diff <= 1e-9
        assert 0.0 < report.mu < 1.0


def test_segmented_keys_split_and_decompose():
    rng = np.random.default_rng(8)
    keys, values = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    seg = SegmentedKeys.split(keys, values, 4, 5)
    assert seg.k_demo.shape == (4, 4) and seg.k_query.shape == (2, 4)
    q = rng.normal(size=4)
    report = seg.decompose(q)
    np.testing.assert_allclose(report.combined, naive_sa(q, keys, values), atol=1e-12)
    assert report.max_abs_diff <= 1e-9
    # the first query row sees a single query key
    assert SegmentedKeys.split(keys, values, 4, 4).k_query.shape == (1, 4)


def test_segmented_keys_row_bounds():
    keys = np.zeros((6, 4))
    with pytest.raises(DimensionError):
        SegmentedKeys.split(keys, keys, 4, 3)
    with pytest.raises(DimensionError):
        SegmentedKeys.split(keys, keys, 4, 6)


def test_mimic_sa_zero_shift_is_standard_attention():
    rng = np.random.default_rng(6)
    q, keys, values = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    params = head_params(rng.normal(size=4), 0.7, np.zeros(4))
    np.testing.assert_array_equal(mimic_sa(q, keys, values, params).data, standard_sa(q, keys, values).data)


def test_mimic_sa_half_magnitude():
    # scores all zero over two keys: log Z2 = ln 2, so f_b = ln 2 gives mu~ = 1/2
    params = head_params([0.0], math.log(2.0), [2.0])
    out = mimic_sa([0.0], [[1.0], [1.0]], [[0.0], [0.0]], params)
    np.testing.assert_allclose(out.data, [1.0])


def test_mimic_sa_saturated_gate():
    rng = np.random.default_rng(7)
    q, keys, values = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    params = head_params(np.zeros(3), -50.0, np.ones(3))
    np.testing.assert_allclose(mimic_sa(q, keys, values, params).data, standard_sa(q, keys, values).data, atol=1e-20)


def test_multi_head_single_head_identity_projection():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    weights = AttentionWeights(Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(np.eye(3)), 1)
    out = multi_head_forward(x, weights)
    for i in range(4):
        expected = standard_sa(x[i], x[: i + 1], x[: i + 1]).data
        np.testing.assert_allclose(out.data[i], expected, atol=1e-12)


def test_multi_head_zero_mimic_matches_plain():
    rng = np.random.default_rng(9)
    d, n_heads = 8, 2
    weights = AttentionWeights(*(Tensor(rng.normal(size=(d, d))) for _ in range(4)), n_heads)
    x = rng.normal(size=(5, d))
    zero = MimicHeadParams.zeros(d // n_heads, n_heads)
    zero.f_w.data = rng.normal(size=zero.f_w.shape)
    np.testing.assert_array_equal(multi_head_forward(x, weights, zero).data, multi_head_forward(x, weights).data)


def test_multi_head_matches_per_head_loop():
    rng = np.random.default_rng(10)
    d, n_heads = 6, 2
    weights = AttentionWeights(*(Tensor(rng.normal(size=(d, d))) for _ in range(4)), n_heads)
    x = rng.normal(size=(4, d))
    concat = np.zeros((4, d))
    for h, head in enumerate(weights.heads()):
        q, k, v = x @ head.w_q.data, x @ head.w_k.data, x @ head.w_v.data
        for i in range(4):
            concat[i, h * 3:(h + 1) * 3] = naive_sa(q[i], k[: i + 1], v[: i + 1])
    np.testing.assert_allclose(multi_head_forward(x, weights).data, concat @ weights.w_o.data, atol=1e-12)


def test_attention_weights_need_divisible_width():
    with pytest.raises(DimensionError):
        AttentionWeights(*(Tensor(np.zeros((6, 6))) for _ in range(4)), 4)
