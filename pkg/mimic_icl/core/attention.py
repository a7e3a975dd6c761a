"""
Self-attention, the in-context decomposition of a head's output, and the
MimIC attention head.

For a query vector q attending over demonstration keys K_D and query-prefix
keys K, full softmax attention splits exactly into

    (1 - mu) * SA(q, K, V) + mu * SA(q, K_D, V_D),   mu = Z1 / (Z1 + Z2)

where Z1 and Z2 are the partition sums over K_D and K. A MimIC head drops the
demonstrations and replaces the second term by a learned shift
``mu~(q, K) * v`` with ``mu~ = logistic(f(q) - log Z2)``.

The single-query functions below are the reference forms; the batched
``head_attention``/``merge_heads`` pair is what the model runs.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .numerics import (
    Tensor,
    as_tensor,
    log_sum_exp,
    logistic,
    matmul,
    reshape,
    rotate_pairs,
    softmax,
    transpose,
)


@dataclass
class HeadWeights:
    """Projections of one head: W_q, W_k, W_v are d x d_h; W_o is the layer's d x d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class AttentionWeights:
    """All heads of one layer, stored as stacked d x d projections."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise DimensionError(f"d_model {d} is not divisible by {self.n_heads} heads")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def head(self, h: int) -> HeadWeights:
        cols = slice(h * self.d_head, (h + 1) * self.d_head)
        return HeadWeights(self.w_q[:, cols], self.w_k[:, cols], self.w_v[:, cols], self.w_o)

    def heads(self) -> Iterator[HeadWeights]:
        for h in range(self.n_heads):
            yield self.head(h)


@dataclass
class SegmentedKeys:
    """Keys and values of one head split at the demonstration boundary l_D."""

    k_demo: np.ndarray
    v_demo: np.ndarray
    k_query: np.ndarray
    v_query: np.ndarray

    @classmethod
    def split(cls, keys: np.ndarray, values: np.ndarray, boundary: int, row: int) -> "SegmentedKeys":
        """Segments seen by the query row at absolute position ``row`` under causal masking."""
        if not boundary <= row < keys.shape[0]:
            raise DimensionError(f"query row {row} must lie in [{boundary}, {keys.shape[0]})")
        return cls(keys[:boundary], values[:boundary], keys[boundary:row + 1], values[boundary:row + 1])

    def decompose(self, q) -> "DecompositionReport":
        return decomposed_icl_sa(q, self.k_demo, self.v_demo, self.k_query, self.v_query)


@dataclass
class MimicHeadParams:
    """Trainable pieces of MimIC heads: the magnitude map f(q) = q.f_w + f_b and the shift v.

    Fields may carry a leading head axis (f_w: N_h x d_h, f_b: N_h, v: N_h x d_h).
    """

    f_w: Tensor
    f_b: Tensor
    v: Tensor

    @classmethod
    def zeros(cls, d_head: int, n_heads: Optional[int] = None, requires_grad: bool = True) -> "MimicHeadParams":
        lead = () if n_heads is None else (n_heads,)
        return cls(
            f_w=Tensor(np.zeros(lead + (d_head,)), requires_grad=requires_grad),
            f_b=Tensor(np.zeros(lead), requires_grad=requires_grad),
            v=Tensor(np.zeros(lead + (d_head,)), requires_grad=requires_grad),
        )

    @property
    def d_head(self) -> int:
        return self.v.shape[-1]

    def parameter_count(self) -> int:
        return self.f_w.size + self.f_b.size + self.v.size

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}f_w": self.f_w, f"{prefix}f_b": self.f_b, f"{prefix}v": self.v}

    def head(self, h: int) -> "MimicHeadParams":
        return MimicHeadParams(self.f_w[h], self.f_b[h], self.v[h])


@dataclass
class DecompositionReport:
    mu: float
    sa_query: np.ndarray
    sa_icd: np.ndarray
    combined: np.ndarray
    full_reference: np.ndarray
    max_abs_diff: float


# -- single-query reference forms ------------------------------------------

def _nonempty(keys: Optional[Tensor]) -> bool:
    return keys is not None and keys.ndim == 2 and keys.shape[0] > 0


def scaled_scores(q, keys) -> Tensor:
    """score_i = (q . K_i) / sqrt(d_h)."""
    q, keys = as_tensor(q), as_tensor(keys)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise DimensionError(f"scaled_scores needs a non-empty key matrix, got shape {keys.shape}")
    if keys.shape[1] != q.shape[-1]:
        raise DimensionError(f"query shape {q.shape} does not match key shape {keys.shape}")
    return matmul(keys, q) / math.sqrt(q.shape[-1])


def standard_sa(q, keys, values) -> Tensor:
    """softmax(scaled scores) weighted sum of the value rows."""
    keys, values = as_tensor(keys), as_tensor(values)
    if values.ndim != 2 or keys.shape[0] != values.shape[0]:
        raise DimensionError(f"keys {keys.shape} and values {values.shape} have different row counts")
    return matmul(softmax(scaled_scores(q, keys)), values)


def partition_terms(q, k_demo, k_query) -> Tuple[Optional[Tensor], Tensor]:
    """(log Z1, log Z2); log Z1 is None when there are no demonstration keys."""
    k_demo = as_tensor(k_demo) if k_demo is not None else None
    log_z1 = log_sum_exp(scaled_scores(q, k_demo)) if _nonempty(k_demo) else None
    return log_z1, log_sum_exp(scaled_scores(q, k_query))


def mu(q, k_demo, k_query) -> Tensor:
    """Share of attention mass on the demonstrations, Z1 / (Z1 + Z2)."""
    log_z1, log_z2 = partition_terms(q, k_demo, k_query)
    if log_z1 is None:
        return Tensor(0.0)
    return logistic(log_z1 - log_z2)


def decomposed_icl_sa(q, k_demo, v_demo, k_query, v_query) -> DecompositionReport:
    """Evaluate both sides of the decomposition identity for one query vector."""
    q = as_tensor(q)
    if k_demo is None:
        k_demo = v_demo = np.zeros((0, q.shape[-1]))
    k_demo, v_demo = as_tensor(k_demo), as_tensor(v_demo)
    k_query, v_query = as_tensor(k_query), as_tensor(v_query)
    if k_demo.shape[0] != v_demo.shape[0]:
        raise DimensionError(f"demonstration keys {k_demo.shape} and values {v_demo.shape} disagree")

    sa_query = standard_sa(q, k_query, v_query).data
    weight = mu(q, k_demo, k_query).item()
    if _nonempty(k_demo):
        sa_icd = standard_sa(q, k_demo, v_demo).data
        full_keys = np.concatenate([k_demo.data, k_query.data])
        full_values = np.concatenate([v_demo.data, v_query.data])
    else:
        sa_icd = np.zeros_like(sa_query)
        full_keys, full_values = k_query.data, v_query.data
    combined = (1.0 - weight) * sa_query + weight * sa_icd
    reference = standard_sa(q, full_keys, full_values).data
    return DecompositionReport(
        mu=weight,
        sa_query=sa_query,
        sa_icd=sa_icd,
        combined=combined,
        full_reference=reference,
        max_abs_diff=float(np.max(np.abs(combined - reference))),
    )


def magnitude_map(q, params: MimicHeadParams) -> Tensor:
    """f(q) = q . f_w + f_b, the learned stand-in for log Z1."""
    return (as_tensor(q) * params.f_w).sum(axis=-1) + params.f_b


def mimic_sa(q, keys, values, params: MimicHeadParams) -> Tensor:
    """SA(q, K, V) + logistic(f(q) - log Z2) * v."""
    log_z2 = log_sum_exp(scaled_scores(q, keys))
    weight = logistic(magnitude_map(q, params) - log_z2)
    return standard_sa(q, keys, values) + weight * params.v


# -- batched heads -------------------------------------------------------------

@dataclass
class HeadActivations:
    """Per-head tensors of one attention layer, shaped (B, N_h, T, ...)."""

    q: Tensor
    k: Tensor
    v: Tensor
    scores: Tensor
    log_z2: Tensor
    sa: Tensor
    extras: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_heads(self) -> int:
        return self.q.shape[1]

    def query_concat(self) -> Tensor:
        """Heads' (position-encoded) queries concatenated back to (B, T, d)."""
        b, h, t, dh = self.q.shape
        return reshape(transpose(self.q, (0, 2, 1, 3)), (b, t, h * dh))


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -np.inf), k=1)


def rotary_tables(positions: np.ndarray, d_head: int, base: float = 10000.0) -> Tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    freqs = base ** (-np.arange(half) / half)
    angles = np.outer(positions, freqs)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def head_attention(
    q_proj: Tensor,
    k_proj: Tensor,
    v_proj: Tensor,
    n_heads: int,
    rotary: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    mask: Optional[np.ndarray] = None,
) -> HeadActivations:
    """Standard attention per head from already projected (B, T, d) queries, keys and values."""
    q = split_heads(q_proj, n_heads)
    k = split_heads(k_proj, n_heads)
    v = split_heads(v_proj, n_heads)
    if rotary is not None:
        cos, sin = rotary
        q = rotate_pairs(q, cos, sin)
        k = rotate_pairs(k, cos, sin)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    log_z2 = log_sum_exp(scores, axis=-1)
    sa = matmul(softmax(scores, axis=-1), v)
    return HeadActivations(q=q, k=k, v=v, scores=scores, log_z2=log_z2, sa=sa)


def mimic_magnitude(acts: HeadActivations, params: MimicHeadParams) -> Tensor:
    """mu~ per head and position, shaped (B, N_h, T)."""
    f = (acts.q * reshape(params.f_w, (acts.n_heads, 1, -1))).sum(axis=-1)
    f = f + reshape(params.f_b, (acts.n_heads, 1))
    return logistic(f - acts.log_z2)


def mimic_heads(acts: HeadActivations, params: MimicHeadParams) -> Tensor:
    """Batched ``mimic_sa``: every head's SA plus its own mu~ * v."""
    weight = mimic_magnitude(acts, params)
    acts.extras["mu_tilde"] = weight
    b, h, t = weight.shape
    return acts.sa + reshape(weight, (b, h, t, 1)) * reshape(params.v, (h, 1, -1))


def concat_heads(heads: Tensor) -> Tensor:
    """(B, N_h, T, d_h) -> (B, T, N_h * d_h)."""
    b, h, t, dh = heads.shape
    return reshape(transpose(heads, (0, 2, 1, 3)), (b, t, h * dh))


def merge_heads(heads: Tensor, w_o: Tensor) -> Tensor:
    """Concatenate head outputs and project with W_o."""
    return matmul(concat_heads(heads), w_o)


def multi_head_forward(
    x,
    weights: AttentionWeights,
    mimic: Optional[MimicHeadParams] = None,
    causal: bool = True,
    rotary: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tensor:
    """Multi-head self-attention over an (l, d) or (B, l, d) input."""
    x = as_tensor(x)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] != weights.d_model:
        raise DimensionError(f"input width {x.shape[-1]} does not match d_model {weights.d_model}")
    mask = causal_mask(x.shape[1]) if causal else None
    acts = head_attention(
        matmul(x, weights.w_q), matmul(x, weights.w_k), matmul(x, weights.w_v),
        weights.n_heads, rotary=rotary, mask=mask,
    )
    heads = mimic_heads(acts, mimic) if mimic is not None else acts.sa
    out = merge_heads(heads, weights.w_o)
    return reshape(out, out.shape[1:]) if single else out
