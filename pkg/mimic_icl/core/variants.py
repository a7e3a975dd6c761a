"""
Ablation and baseline mechanisms built around the frozen base model.

Each variant is an ``Intervention``: MimIC heads and their ablations rewrite
the per-head attention outputs, the LIVE-style vector and the task/function
vector patches edit the residual stream after an FFN, and LoRA adds low-rank
terms to the attention projections.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import HeadActivations, MimicHeadParams, mimic_magnitude
from .errors import ConfigError, DimensionError
from .model import HeadRecorder, Intervention, LayerTrace, MimicHeads, PromptContext, TransformerModel
from .numerics import Tensor, logistic, matmul, no_grad, reshape

logger = logging.getLogger(__name__)

VARIANT_KINDS = (
    "mimic",
    "head_sharing_mu",
    "query_sharing_mu",
    "linear_shift",
    "live_style",
    "task_vector",
    "function_vector",
    "lora",
    "mimic_plus_lora",
)

# kind-specific parameters and their defaults
_KIND_PARAMS = {
    "lora": {"lora_rank": 2, "lora_dropout": 0.05},
    "mimic_plus_lora": {"lora_rank": 2, "lora_dropout": 0.05},
    "live_style": {"live_scale_init": 0.1},
    "linear_shift": {"gate_bias_init": -4.0},
    "task_vector": {"patch_layer": None},
    "function_vector": {"patch_layer": None, "fv_heads": 4},
}

NEUTRAL_GATE_BIAS = -60.0
LORA_TARGETS = ("q", "k", "v", "o")


@dataclass
class VariantConfig:
    kind: str = "mimic"
    lora_rank: Optional[int] = None
    lora_dropout: Optional[float] = None
    live_scale_init: Optional[float] = None
    gate_bias_init: Optional[float] = None
    patch_layer: Optional[int] = None
    fv_heads: Optional[int] = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant kind {self.kind!r}; choose from {', '.join(VARIANT_KINDS)}")
        own = _KIND_PARAMS.get(self.kind, {})
        for f in fields(self):
            if f.name == "kind":
                continue
            value = getattr(self, f.name)
            if f.name in own:
                if value is None:
                    setattr(self, f.name, own[f.name])
            elif value is not None:
                raise ConfigError(f"variant parameter {f.name!r} does not apply to kind {self.kind!r}")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be positive, got {self.lora_rank}")
        if self.lora_dropout is not None and not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"lora_dropout must lie in [0, 1), got {self.lora_dropout}")

    @property
    def trainable(self) -> bool:
        return self.kind not in ("task_vector", "function_vector")

    def to_dict(self) -> Dict:
        return {k: v for k, v in asdict(self).items() if k == "kind" or v is not None}

    @classmethod
    def from_dict(cls, data: Dict) -> "VariantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown variant config keys: {sorted(unknown)}")
        return cls(**data)


def _param(value: np.ndarray, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


class MimicVariant(MimicHeads):
    """The full method: per-head query-dependent magnitude and per-head shift."""

    kind = "mimic"


class HeadSharingVariant(Intervention):
    """One mu~ per layer from g over the concatenated queries, shared by all heads."""

    kind = "head_sharing_mu"

    def __init__(self, n_layers: int, n_heads: int, d_head: int):
        d = n_heads * d_head
        self.g_w = [_param(np.zeros(d), f"head_sharing.{i}.g_w") for i in range(n_layers)]
        self.g_b = [_param(np.zeros(()), f"head_sharing.{i}.g_b") for i in range(n_layers)]
        self.v = [_param(np.zeros((n_heads, d_head)), f"head_sharing.{i}.v") for i in range(n_layers)]

    def shift_heads(self, layer: int, acts: HeadActivations) -> Tensor:
        b, h, t, dh = acts.sa.shape
        g = (acts.query_concat() * self.g_w[layer]).sum(axis=-1) + self.g_b[layer]
        weight = logistic(g - acts.log_z2.mean(axis=1))
        acts.extras["mu_tilde"] = reshape(weight, (b, 1, t)) * np.ones((1, h, 1))
        return acts.sa + reshape(weight, (b, 1, t, 1)) * reshape(self.v[layer], (h, 1, dh))

    def parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.g_w + self.g_b + self.v}


class QuerySharingVariant(Intervention):
    """f removed: a learnable per-head mu, constant across queries."""

    kind = "query_sharing_mu"

    def __init__(self, n_layers: int, n_heads: int, d_head: int, mu_init: float = 0.5):
        self.mu = [_param(np.full(n_heads, mu_init), f"query_sharing.{i}.mu") for i in range(n_layers)]
        self.v = [_param(np.zeros((n_heads, d_head)), f"query_sharing.{i}.v") for i in range(n_layers)]

    def shift_heads(self, layer: int, acts: HeadActivations) -> Tensor:
        b, h, t, dh = acts.sa.shape
        weight = reshape(self.mu[layer], (h, 1, 1))
        acts.extras["mu_tilde"] = reshape(weight, (1, h, 1)) * np.ones((b, 1, t))
        return acts.sa + weight * reshape(self.v[layer], (h, 1, dh))

    def parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.mu + self.v}


class LinearShiftVariant(Intervention):
    """v replaced by a per-head linear map h(q) standing in for SA(q, K_D, V_D).

    Output is (1 - mu~) * SA + mu~ * h(q).
    """

    kind = "linear_shift"

    def __init__(self, n_layers: int, n_heads: int, d_head: int, gate_bias_init: float = -4.0):
        self.gate = [
            MimicHeadParams(
                f_w=_param(np.zeros((n_heads, d_head)), f"linear_shift.{i}.f_w"),
                f_b=_param(np.full(n_heads, gate_bias_init), f"linear_shift.{i}.f_b"),
                v=Tensor(np.zeros((n_heads, d_head))),
            )
            for i in range(n_layers)
        ]
        self.h_w = [_param(np.zeros((n_heads, d_head, d_head)), f"linear_shift.{i}.h_w") for i in range(n_layers)]
        self.h_b = [_param(np.zeros((n_heads, d_head)), f"linear_shift.{i}.h_b") for i in range(n_layers)]

    def shift_heads(self, layer: int, acts: HeadActivations) -> Tensor:
        b, h, t, dh = acts.sa.shape
        weight = mimic_magnitude(acts, self.gate[layer])
        acts.extras["mu_tilde"] = weight
        mapped = matmul(acts.q, self.h_w[layer]) + reshape(self.h_b[layer], (h, 1, dh))
        return acts.sa + reshape(weight, (b, h, t, 1)) * (mapped - acts.sa)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for gate in self.gate:
            params[gate.f_w.name] = gate.f_w
            params[gate.f_b.name] = gate.f_b
        params.update({p.name: p for p in self.h_w + self.h_b})
        return params


class LiveStyleVariant(Intervention):
    """A learnable vector per layer added after the FFN with a query-independent scale."""

    kind = "live_style"

    def __init__(self, n_layers: int, d_model: int, scale_init: float = 0.1):
        self.vector = [_param(np.zeros(d_model), f"live.{i}.vector") for i in range(n_layers)]
        self.scale = [_param(np.full((), scale_init), f"live.{i}.scale") for i in range(n_layers)]

    def after_ffn(self, layer: int, hidden: Tensor) -> Tensor:
        return hidden + self.scale[layer] * self.vector[layer]

    def parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.vector + self.scale}


class PatchVariant(Intervention):
    """Adds a fixed vector to the last token's residual stream after the FFN of one layer."""

    def __init__(self, kind: str, layer: int, vector: np.ndarray, position: int = -1):
        self.kind = kind
        self.layer = layer
        self.vector = np.asarray(vector, dtype=np.float64)
        self.position = position

    def after_ffn(self, layer: int, hidden: Tensor) -> Optional[Tensor]:
        if layer != self.layer:
            return None
        delta = np.zeros(hidden.shape)
        delta[:, self.position, :] = self.vector
        return hidden + delta


class LoraAdapter(Intervention):
    """Low-rank updates x -> dropout(x) A B * (alpha / r) on W_q, W_k, W_v, W_o of every layer."""

    kind = "lora"

    def __init__(self, n_layers: int, d_model: int, rank: int, dropout: float, rng: np.random.Generator):
        if rank > d_model:
            raise DimensionError(f"LoRA rank {rank} exceeds d_model {d_model}")
        self.rank = rank
        self.alpha = 2.0 * rank
        self.dropout = dropout
        self.rng = rng
        self.a: Dict[Tuple[int, str], Tensor] = {}
        self.b: Dict[Tuple[int, str], Tensor] = {}
        for i in range(n_layers):
            for name in LORA_TARGETS:
                self.a[(i, name)] = _param(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, rank)), f"lora.{i}.{name}.A")
                self.b[(i, name)] = _param(np.zeros((rank, d_model)), f"lora.{i}.{name}.B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def projection_delta(self, layer: int, name: str, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            keep = (self.rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
            x = x * keep
        return matmul(matmul(x, self.a[(layer, name)]), self.b[(layer, name)]) * self.scaling

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for key in self.a:
            params[self.a[key].name] = self.a[key]
            params[self.b[key].name] = self.b[key]
        return params


class CombinedIntervention(Intervention):
    """Several interventions in one forward; the first head rewrite wins."""

    def __init__(self, parts: Sequence[Intervention], kind: str):
        self.parts = list(parts)
        self.kind = kind
        names = [name for part in self.parts for name in part.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError(f"parameter registered twice in {kind}")

    @property
    def training(self) -> bool:
        return any(part.training for part in self.parts)

    @training.setter
    def training(self, mode: bool) -> None:
        for part in self.parts:
            part.training = mode

    def projection_delta(self, layer, name, x):
        deltas = [d for d in (p.projection_delta(layer, name, x) for p in self.parts) if d is not None]
        if not deltas:
            return None
        total = deltas[0]
        for d in deltas[1:]:
            total = total + d
        return total

    def shift_heads(self, layer, acts):
        for part in self.parts:
            out = part.shift_heads(layer, acts)
            if out is not None:
                return out
        return None

    def after_ffn(self, layer, hidden):
        changed = False
        for part in self.parts:
            out = part.after_ffn(layer, hidden)
            if out is not None:
                hidden, changed = out, True
        return hidden if changed else None

    def parameters(self):
        params = {}
        for part in self.parts:
            params.update(part.parameters())
        return params


class VariantModel:
    """The frozen base model with one variant's intervention attached."""

    def __init__(self, base: TransformerModel, config: VariantConfig, intervention: Intervention):
        self.base = base
        self.config = config
        self.intervention = intervention

    @property
    def kind(self) -> str:
        return self.config.kind

    def forward(self, tokens, align_point: str = "after_ffn") -> LayerTrace:
        return self.base.forward(tokens, self.intervention, align_point)

    def parameters(self) -> Dict[str, Tensor]:
        return self.intervention.parameters()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def train(self, mode: bool = True) -> "VariantModel":
        self.intervention.training = mode
        return self

    def eval(self) -> "VariantModel":
        return self.train(False)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.parameters().items()}
        if isinstance(self.intervention, PatchVariant):
            arrays["patch.vector"] = self.intervention.vector
            arrays["patch.layer"] = np.array(float(self.intervention.layer))
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint lacks variant parameter {name}")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        if isinstance(self.intervention, PatchVariant) and "patch.vector" in arrays:
            self.intervention.vector = np.array(arrays["patch.vector"], dtype=np.float64)
            self.intervention.layer = int(arrays["patch.layer"])


def build_variant(
    cfg: VariantConfig,
    model: TransformerModel,
    rng: Optional[np.random.Generator] = None,
    neutral: bool = False,
) -> VariantModel:
    """Attach ``cfg``'s mechanism to a frozen copy-free view of ``model``.

    ``neutral`` starts every variant at the point where it reproduces the base
    forward (only linear_shift differs from its training initialization).
    Patch variants start with a zero vector until ``tv_extract``/``fv_extract``
    fill them.
    """
    mc = model.config
    model.freeze()
    rng = rng if rng is not None else np.random.default_rng(mc.seed)
    kind = cfg.kind
    if kind == "mimic":
        intervention: Intervention = MimicVariant.initial(mc)
    elif kind == "head_sharing_mu":
        intervention = HeadSharingVariant(mc.n_layers, mc.n_heads, mc.d_head)
    elif kind == "query_sharing_mu":
        intervention = QuerySharingVariant(mc.n_layers, mc.n_heads, mc.d_head)
    elif kind == "linear_shift":
        gate = NEUTRAL_GATE_BIAS if neutral else cfg.gate_bias_init
        intervention = LinearShiftVariant(mc.n_layers, mc.n_heads, mc.d_head, gate)
    elif kind == "live_style":
        intervention = LiveStyleVariant(mc.n_layers, mc.d_model, cfg.live_scale_init)
    elif kind in ("task_vector", "function_vector"):
        layer = cfg.patch_layer if cfg.patch_layer is not None else mc.n_layers // 2
        if not 0 <= layer < mc.n_layers:
            raise DimensionError(f"patch layer {layer} outside [0, {mc.n_layers})")
        intervention = PatchVariant(kind, layer, np.zeros(mc.d_model))
    elif kind == "lora":
        intervention = LoraAdapter(mc.n_layers, mc.d_model, cfg.lora_rank, cfg.lora_dropout, rng)
    else:
        intervention = CombinedIntervention(
            [MimicVariant.initial(mc), LoraAdapter(mc.n_layers, mc.d_model, cfg.lora_rank, cfg.lora_dropout, rng)],
            kind,
        )
    variant = VariantModel(model, cfg, intervention)
    logger.debug("built %s variant with %d trainable parameters", kind, variant.parameter_count())
    return variant


# -- task and function vectors ------------------------------------------------

def _stack_demonstrations(demos: Sequence[PromptContext]) -> Tuple[np.ndarray, int]:
    blocks = [np.concatenate(ctx.icd_tokens) for ctx in demos if ctx.icd_tokens]
    if not blocks:
        raise DimensionError("task/function vector extraction needs contexts with demonstrations")
    if len({len(b) for b in blocks}) != 1:
        raise DimensionError("demonstration blocks must share one length to be stacked")
    return np.stack(blocks), len(blocks[0]) - 1


def tv_extract(model: TransformerModel, demos: Sequence[PromptContext], layer: int) -> np.ndarray:
    """Mean layer-``layer`` hidden state at the last demonstration token."""
    tokens, last = _stack_demonstrations(demos)
    with no_grad():
        trace = model.forward(tokens)
    return trace.after_ffn[layer].data[:, last, :].mean(axis=0)


def tv_apply(model: TransformerModel, tokens, layer: int, vector: np.ndarray, align_point: str = "after_ffn") -> LayerTrace:
    """Zero-shot run with ``vector`` added to the last token after layer ``layer``."""
    with no_grad():
        return model.forward(tokens, PatchVariant("task_vector", layer, vector), align_point)


def head_vectors(model: TransformerModel, demos: Sequence[PromptContext]) -> np.ndarray:
    """(N, N_h, d) mean W_o-projected head outputs at the last demonstration token."""
    tokens, last = _stack_demonstrations(demos)
    recorder = HeadRecorder()
    with no_grad():
        model.forward(tokens, recorder)
    mc = model.config
    out = np.zeros((mc.n_layers, mc.n_heads, mc.d_model))
    for layer, acts in enumerate(recorder.acts):
        sa = acts.sa.data
        w_o = model.layer_attention(layer).w_o.data
        for h in range(mc.n_heads):
            rows = slice(h * mc.d_head, (h + 1) * mc.d_head)
            out[layer, h] = sa[:, h, last, :].mean(axis=0) @ w_o[rows]
    return out


def fv_extract(model: TransformerModel, demos: Sequence[PromptContext], heads: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Sum of the selected heads' mean projected outputs."""
    per_head = head_vectors(model, demos)
    vector = np.zeros(model.config.d_model)
    for layer, h in heads:
        vector = vector + per_head[layer, h]
    return vector


ScoreFn = Callable[[Intervention], float]


def rank_heads(model: TransformerModel, demos: Sequence[PromptContext], layer: int, score: ScoreFn) -> List[Tuple[int, int]]:
    """Heads ordered by the validation score of patching each one alone at ``layer``."""
    per_head = head_vectors(model, demos)
    mc = model.config
    scored = []
    for l in range(mc.n_layers):
        for h in range(mc.n_heads):
            scored.append((score(PatchVariant("function_vector", layer, per_head[l, h])), l, h))
    scored.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [(l, h) for _, l, h in scored]


def sweep_patch_layer(model: TransformerModel, vector_for_layer: Callable[[int], np.ndarray], score: ScoreFn, kind: str) -> Tuple[int, List[float]]:
    """Validation score of patching at every layer; returns (best layer, scores)."""
    scores = [score(PatchVariant(kind, layer, vector_for_layer(layer))) for layer in range(model.config.n_layers)]
    best = int(np.argmax(scores))
    logger.info("%s layer sweep: %s -> layer %d", kind, [round(s, 3) for s in scores], best)
    return best, scores
