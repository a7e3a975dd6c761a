"""
Toy decoder-only transformer with hidden-state tracing.

The frozen base model plays the "original LMM"; interventions (MimIC heads
and the baseline variants) plug into the forward pass through the hooks of
``Intervention`` without touching base weights.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import (
    AttentionWeights,
    HeadActivations,
    MimicHeadParams,
    causal_mask,
    concat_heads,
    head_attention,
    mimic_heads,
    rotary_tables,
)
from .errors import ConfigError, DimensionError
from .numerics import Tensor, gelu, matmul, no_grad, rms_norm

logger = logging.getLogger(__name__)

ALIGN_POINTS = ("after_sa", "after_ffn")


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 64
    max_len: int = 64
    ffn_mult: int = 4
    position_scheme: str = "rotary"
    rotary_base: float = 10000.0
    init_scale: float = 0.02
    qk_init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_len", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.position_scheme != "rotary":
            raise ConfigError(f"unsupported position scheme: {self.position_scheme}")
        if self.d_head % 2:
            raise ConfigError(f"rotary encoding needs an even head width, got d_head={self.d_head}")
        if self.init_scale <= 0 or self.qk_init_scale <= 0:
            raise ConfigError("model.init_scale and model.qk_init_scale must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model

    def mimic_parameter_count(self) -> int:
        return self.n_layers * self.n_heads * (2 * self.d_head + 1)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PromptContext:
    """One episode: k demonstration blocks X_D followed by the query X."""

    icd_tokens: List[np.ndarray]
    query_tokens: np.ndarray
    answer_span: Tuple[int, int]

    def __post_init__(self):
        self.icd_tokens = [np.asarray(block, dtype=np.int64) for block in self.icd_tokens]
        self.query_tokens = np.asarray(self.query_tokens, dtype=np.int64)
        start, end = self.answer_span
        if not (0 <= start <= end <= len(self.query_tokens)):
            raise DimensionError(
                f"answer span {self.answer_span} outside query of length {len(self.query_tokens)}"
            )
        if len(self.query_tokens) == 0:
            raise DimensionError("query must hold at least one token")

    @property
    def k(self) -> int:
        return len(self.icd_tokens)

    @property
    def boundary(self) -> int:
        """l_D, the number of demonstration tokens."""
        return int(sum(len(block) for block in self.icd_tokens))

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate(self.icd_tokens + [self.query_tokens]) if self.icd_tokens else self.query_tokens

    def __len__(self) -> int:
        return self.boundary + len(self.query_tokens)


@dataclass
class LayerTrace:
    """Hidden states of every layer at both capture points, plus final logits.

    Arrays are batched: (B, l, d) per layer and (B, l, vocab) logits.
    """

    after_sa: List[Tensor]
    after_ffn: List[Tensor]
    logits: Tensor
    align_point: str = "after_ffn"
    head_stats: List[Dict[str, Tensor]] = field(default_factory=list)

    @property
    def hidden(self) -> List[Tensor]:
        return self.after_sa if self.align_point == "after_sa" else self.after_ffn

    @property
    def n_layers(self) -> int:
        return len(self.after_ffn)

    def rows(self, start: int, stop: Optional[int] = None) -> "LayerTrace":
        """Sequence rows [start, stop), re-indexed from 0."""
        cut = slice(start, stop)
        return LayerTrace(
            after_sa=[h[:, cut] for h in self.after_sa],
            after_ffn=[h[:, cut] for h in self.after_ffn],
            logits=self.logits[:, cut],
            align_point=self.align_point,
            head_stats=[
                {name: t[:, :, cut] for name, t in stats.items()} for stats in self.head_stats
            ],
        )

    def with_align_point(self, align_point: str) -> "LayerTrace":
        if align_point not in ALIGN_POINTS:
            raise ConfigError(f"align_point must be one of {ALIGN_POINTS}, got {align_point!r}")
        return LayerTrace(self.after_sa, self.after_ffn, self.logits, align_point, self.head_stats)


class Intervention:
    """Hooks a variant may override; the defaults leave the base forward untouched."""

    training = False

    def projection_delta(self, layer: int, name: str, x: Tensor) -> Optional[Tensor]:
        """Additive term for projection ``name`` in {q, k, v, o} given its input."""
        return None

    def shift_heads(self, layer: int, acts: HeadActivations) -> Optional[Tensor]:
        """Replacement for the per-head outputs (B, N_h, T, d_h)."""
        return None

    def after_ffn(self, layer: int, hidden: Tensor) -> Optional[Tensor]:
        """Replacement for the residual stream after the layer's FFN."""
        return None

    def parameters(self) -> Dict[str, Tensor]:
        return {}


class HeadRecorder(Intervention):
    """Keeps every layer's head activations and leaves the forward untouched."""

    def __init__(self):
        self.acts: List[HeadActivations] = []

    def shift_heads(self, layer: int, acts: HeadActivations) -> None:
        self.acts.append(acts)
        return None


class MimicHeads(Intervention):
    """Every attention head of every layer becomes a MimIC head."""

    def __init__(self, layers: Sequence[MimicHeadParams]):
        self.layers = list(layers)

    @classmethod
    def initial(cls, config: ModelConfig) -> "MimicHeads":
        return cls([MimicHeadParams.zeros(config.d_head, config.n_heads) for _ in range(config.n_layers)])

    def shift_heads(self, layer: int, acts: HeadActivations) -> Tensor:
        return mimic_heads(acts, self.layers[layer])

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(prefix=f"mimic.{i}."))
        return params


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (T,) or (B, T), got shape {tokens.shape}")
    return tokens


class TransformerModel:
    """Pre-norm decoder with rotary attention, GELU FFN and untied unembedding."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, Tensor]] = None):
        self.config = config
        self.params = params if params is not None else self._init_params(config)
        self._rotary_cache: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    @staticmethod
    def _init_params(config: ModelConfig) -> Dict[str, Tensor]:
        rng = np.random.default_rng(config.seed)
        d, f, s = config.d_model, config.d_ffn, config.init_scale
        # queries and keys start large enough that attention is not flat
        qk = config.qk_init_scale
        residual_scale = s / np.sqrt(2 * config.n_layers)
        params = {"embed": rng.normal(0.0, s, (config.vocab_size, d))}
        for i in range(config.n_layers):
            p = f"layers.{i}."
            params[p + "norm_attn"] = np.ones(d)
            params[p + "w_q"] = rng.normal(0.0, qk, (d, d))
            params[p + "w_k"] = rng.normal(0.0, qk, (d, d))
            params[p + "w_v"] = rng.normal(0.0, s, (d, d))
            params[p + "w_o"] = rng.normal(0.0, residual_scale, (d, d))
            params[p + "norm_ffn"] = np.ones(d)
            params[p + "w_in"] = rng.normal(0.0, s, (d, f))
            params[p + "b_in"] = np.zeros(f)
            params[p + "w_out"] = rng.normal(0.0, residual_scale, (f, d))
            params[p + "b_out"] = np.zeros(d)
        params["norm_final"] = np.ones(d)
        params["unembed"] = rng.normal(0.0, s, (d, config.vocab_size))
        return {name: Tensor(value, name=name) for name, value in params.items()}

    # -- parameter management ------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def freeze(self) -> "TransformerModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "TransformerModel":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()

    def layer_attention(self, layer: int) -> AttentionWeights:
        p = f"layers.{layer}."
        return AttentionWeights(
            self.params[p + "w_q"], self.params[p + "w_k"], self.params[p + "w_v"],
            self.params[p + "w_o"], self.config.n_heads,
        )

    def _rotary(self, offset: int, length: int) -> Tuple[np.ndarray, np.ndarray]:
        key = (offset, length)
        if key not in self._rotary_cache:
            positions = np.arange(offset, offset + length)
            self._rotary_cache[key] = rotary_tables(positions, self.config.d_head, self.config.rotary_base)
        return self._rotary_cache[key]

    # -- forward passes ----------------------------------------------------------

    def _project(self, x: Tensor, layer: int, name: str, intervention: Optional[Intervention]) -> Tensor:
        out = matmul(x, self.params[f"layers.{layer}.w_{name}"])
        if intervention is not None:
            delta = intervention.projection_delta(layer, name, x)
            if delta is not None:
                out = out + delta
        return out

    def forward(
        self,
        tokens,
        intervention: Optional[Intervention] = None,
        align_point: str = "after_ffn",
        extra_mask: Optional[np.ndarray] = None,
        position_offset: int = 0,
    ) -> LayerTrace:
        """Causal forward pass; returns the trace (logits included) of a (B, T) token batch."""
        if align_point not in ALIGN_POINTS:
            raise ConfigError(f"align_point must be one of {ALIGN_POINTS}, got {align_point!r}")
        tokens = _as_batch(tokens)
        length = tokens.shape[1]
        if position_offset + length > self.config.max_len:
            raise DimensionError(
                f"sequence of {length} tokens at offset {position_offset} exceeds max_len {self.config.max_len}"
            )
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise DimensionError(f"token ids must lie in [0, {self.config.vocab_size})")

        mask = causal_mask(length)
        if extra_mask is not None:
            mask = mask + extra_mask
        rotary = self._rotary(position_offset, length)

        hidden = self.params["embed"][tokens]
        after_sa: List[Tensor] = []
        after_ffn: List[Tensor] = []
        head_stats: List[Dict[str, Tensor]] = []
        for i in range(self.config.n_layers):
            p = f"layers.{i}."
            x = rms_norm(hidden, self.params[p + "norm_attn"])
            acts = head_attention(
                self._project(x, i, "q", intervention),
                self._project(x, i, "k", intervention),
                self._project(x, i, "v", intervention),
                self.config.n_heads, rotary=rotary, mask=mask,
            )
            heads = intervention.shift_heads(i, acts) if intervention is not None else None
            merged = concat_heads(acts.sa if heads is None else heads)
            hidden = hidden + self._project(merged, i, "o", intervention)
            after_sa.append(hidden)
            head_stats.append(acts.extras)

            x = rms_norm(hidden, self.params[p + "norm_ffn"])
            inner = gelu(matmul(x, self.params[p + "w_in"]) + self.params[p + "b_in"])
            hidden = hidden + matmul(inner, self.params[p + "w_out"]) + self.params[p + "b_out"]
            if intervention is not None:
                patched = intervention.after_ffn(i, hidden)
                if patched is not None:
                    hidden = patched
            after_ffn.append(hidden)

        logits = matmul(rms_norm(hidden, self.params["norm_final"]), self.params["unembed"])
        return LayerTrace(after_sa, after_ffn, logits, align_point, head_stats)

    def forward_with_trace(
        self, tokens, mimic_params: Optional[Sequence[MimicHeadParams]] = None, align_point: str = "after_ffn"
    ) -> Tuple[Tensor, LayerTrace]:
        intervention = MimicHeads(mimic_params) if mimic_params is not None else None
        trace = self.forward(tokens, intervention, align_point)
        return trace.logits, trace

    def icl_forward(
        self,
        contexts: Union[PromptContext, Sequence[PromptContext]],
        align_point: str = "after_ffn",
        hide_demonstrations: bool = False,
    ) -> LayerTrace:
        """Teacher run of the frozen base on [X_D; X], restricted to the query rows.

        ``hide_demonstrations`` masks the demonstration keys out of the query
        rows' attention, which must reproduce the zero-shot run.
        """
        if isinstance(contexts, PromptContext):
            contexts = [contexts]
        boundary = contexts[0].boundary
        lengths = {len(ctx) for ctx in contexts}
        if len(lengths) != 1 or any(ctx.boundary != boundary for ctx in contexts):
            raise DimensionError("contexts in one teacher batch must share l_D and l_q")
        tokens = np.stack([ctx.tokens for ctx in contexts])
        extra_mask = None
        if hide_demonstrations and boundary:
            extra_mask = np.zeros((tokens.shape[1],) * 2)
            extra_mask[boundary:, :boundary] = -np.inf
        with no_grad():
            trace = self.forward(tokens, None, align_point, extra_mask=extra_mask)
        return trace.rows(boundary)

    def mimic_forward(
        self, query_tokens, mimic_params: Sequence[MimicHeadParams], align_point: str = "after_ffn"
    ) -> LayerTrace:
        return self.forward(query_tokens, MimicHeads(mimic_params), align_point)

    def embed_tokens(self, tokens) -> np.ndarray:
        return self.params["embed"].data[np.asarray(tokens, dtype=np.int64)]
