"""
Dual-forward distillation of ICL runs into variant parameters.

Each step runs the frozen base on ``[X_D; X]`` (teacher, no gradient) and the
variant-augmented model on ``X`` alone (student), then updates only the
variant parameters against ``L_align + lambda * L_gt``. The module also holds
the full-parameter pretraining that gives the toy base its ICL ability.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from itertools import islice
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError
from .evaluation import EvalSet, build_eval_set, patched_scorer
from .model import ALIGN_POINTS, LayerTrace, PromptContext, TransformerModel
from .numerics import Tensor, backward, getitem, log_softmax, tsum, zero_grads
from .tasks import Episode, Sample, context_from_samples, generate_pretraining_stream
from .variants import (
    PatchVariant,
    VariantConfig,
    VariantModel,
    fv_extract,
    rank_heads,
    sweep_patch_layer,
    tv_extract,
)

logger = logging.getLogger(__name__)

ALIGN_KINDS = ("l2", "kl")

ProgressHook = Callable[[Dict], None]


@dataclass
class TrainConfig:
    k_shots: int = 8
    lam: float = 0.5
    lr: float = 5e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 1e-3
    batch: int = 2
    grad_accum: int = 2
    epochs: int = 10
    seed: int = 0
    align_point: str = "after_ffn"
    align_kind: str = "l2"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    disjoint_episodes: bool = True
    patch_contexts: int = 32
    # share of the training inputs held out to pick the best epoch
    validation_fraction: float = 0.2
    variant: VariantConfig = field(default_factory=VariantConfig)

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = VariantConfig.from_dict(self.variant)
        if self.lam < 0:
            raise ConfigError(f"train.lam must be non-negative, got {self.lam}")
        if self.k_shots < 1:
            raise ConfigError(f"train.k_shots must be at least 1, got {self.k_shots}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"train.warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.batch < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ConfigError("train.batch, train.grad_accum and train.epochs must be positive")
        if self.align_point not in ALIGN_POINTS:
            raise ConfigError(f"train.align_point must be one of {ALIGN_POINTS}")
        if self.align_kind not in ALIGN_KINDS:
            raise ConfigError(f"train.align_kind must be one of {ALIGN_KINDS}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"train.validation_fraction must lie in [0, 1), got {self.validation_fraction}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["variant"] = self.variant.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PretrainConfig:
    steps: int = 12000
    batch_size: int = 32
    lr: float = 2e-3
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    k_min: int = 2
    k_max: int = 8
    alphabet_size: int = 16
    families: List[str] = field(default_factory=lambda: ["permutation", "modular_offset"])
    # relative draw frequency per family; empty means uniform
    family_weights: List[float] = field(default_factory=lambda: [1.0, 3.0])
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("pretrain.steps and pretrain.batch_size must be positive")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= pretrain.k_min <= pretrain.k_max, got {self.k_min}, {self.k_max}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"pretrain.warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if not self.families:
            raise ConfigError("pretrain.families must name at least one task family")
        if self.family_weights:
            if len(self.family_weights) != len(self.families):
                raise ConfigError(
                    f"pretrain.family_weights has {len(self.family_weights)} entries for {len(self.families)} families"
                )
            if min(self.family_weights) < 0 or sum(self.family_weights) <= 0:
                raise ConfigError("pretrain.family_weights must be non-negative with a positive sum")

    @classmethod
    def from_dict(cls, data: Dict) -> "PretrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    align: float
    gt: float
    total: float

    def record(self, step: int, lr: float) -> Dict:
        return {"step": step, "lr": lr, "align": self.align, "gt": self.gt, "total": self.total}


# -- episodes -------------------------------------------------------------------

def sample_episode(
    dataset: Sequence[Sample], k: int, rng: np.random.Generator, disjoint: bool = False
) -> Tuple[List[Sample], Sample]:
    """k demonstrations plus one query, all distinct dataset entries.

    The query is uniform over the dataset; demonstrations come in random
    order. ``disjoint`` additionally keeps samples with the query's input out
    of the demonstrations.
    """
    n = len(dataset)
    if n < k + 1:
        raise DimensionError(f"dataset of {n} samples is too small for {k} demonstrations plus a query")
    q = int(rng.integers(n))
    eligible = [i for i in range(n) if i != q and not (disjoint and dataset[i].x == dataset[q].x)]
    if len(eligible) < k:
        raise DimensionError(f"only {len(eligible)} samples are eligible as demonstrations for k={k}")
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [dataset[eligible[i]] for i in picks], dataset[q]


# -- losses ---------------------------------------------------------------------

def alignment_loss(student: LayerTrace, teacher: LayerTrace) -> Tensor:
    """(1/N) sum over layers and query rows of the squared L2 distance, averaged over the batch."""
    h_student, h_teacher = student.hidden, teacher.hidden
    if len(h_student) != len(h_teacher):
        raise DimensionError(f"student has {len(h_student)} layers, teacher {len(h_teacher)}")
    total = None
    for s, t in zip(h_student, h_teacher):
        if s.shape != t.shape:
            raise DimensionError(f"hidden state shapes differ: {s.shape} vs {t.shape}")
        diff = s - t.data
        term = tsum(diff * diff)
        total = term if total is None else total + term
    batch = h_student[0].shape[0] if h_student[0].ndim == 3 else 1
    return total / float(len(h_student) * batch)


def _as_positions(positions, logits: Tensor) -> Tuple[np.ndarray, np.ndarray]:
    b = logits.shape[0]
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim == 1:
        pos = np.broadcast_to(pos, (b, pos.size))
    rows = np.repeat(np.arange(b)[:, None], pos.shape[1], axis=1)
    return rows, pos


def kl_alignment_loss(student_logits: Tensor, teacher_logits, positions) -> Tensor:
    """Mean over answer positions of KL(teacher || student) of the softmaxed logits."""
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher.shape:
        raise DimensionError(f"logit shapes differ: {student_logits.shape} vs {teacher.shape}")
    if student_logits.ndim == 2:
        student_logits = student_logits.reshape(1, *student_logits.shape)
        teacher = teacher[None]
    rows, pos = _as_positions(positions, student_logits)
    t = teacher[rows, pos]
    shifted = t - t.max(axis=-1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    # 0 * log 0 := 0
    entropy_term = np.where(p > 0, p * np.where(p > 0, log_p, 0.0), 0.0).sum()
    log_q = getitem(log_softmax(student_logits, axis=-1), (rows, pos))
    cross = tsum(log_q * p)
    return (-cross + entropy_term) / float(pos.size)


def ground_truth_loss(logits: Tensor, contexts: Union[PromptContext, Sequence[PromptContext]], offset: int = 0) -> Tensor:
    """Mean cross-entropy over the answer-span tokens.

    ``logits`` cover the query rows (``offset`` shifts to rows further right);
    token ``j`` of the span is predicted by row ``j - 1``.
    """
    if isinstance(contexts, PromptContext):
        contexts = [contexts]
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    if logits.shape[0] != len(contexts):
        raise DimensionError(f"{logits.shape[0]} logit rows for {len(contexts)} contexts")
    rows, cols, targets = [], [], []
    for b, ctx in enumerate(contexts):
        start, end = ctx.answer_span
        if end <= start:
            raise DimensionError("ground-truth loss needs a non-empty answer span")
        if start < 1:
            raise DimensionError("an answer span starting at position 0 has no predicting row")
        for j in range(start, end):
            rows.append(b)
            cols.append(offset + j - 1)
            targets.append(int(ctx.query_tokens[j]))
    log_probs = log_softmax(logits, axis=-1)
    picked = getitem(log_probs, (np.asarray(rows), np.asarray(cols), np.asarray(targets)))
    return -picked.mean()


def total_loss(align, gt, lam: float):
    return align + lam * gt


def lr_schedule(step: float, total_steps: int, cfg) -> float:
    """Linear warmup over ``warmup_ratio`` of the steps, then cosine decay to zero."""
    peak = cfg.lr
    warmup = cfg.warmup_ratio * total_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return 0.5 * (1.0 + math.cos(math.pi * progress)) * peak


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


def grad_norm(params: Dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values() if p.grad is not None))


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _check_finite(breakdown: LossBreakdown, params: Dict[str, Tensor], step: int, lr: float) -> None:
    bad = [name for name, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad or not all(math.isfinite(v) for v in (breakdown.align, breakdown.gt, breakdown.total)):
        raise NonFiniteError(
            f"non-finite loss or gradient at step {step}",
            {
                "step": step,
                "lr": lr,
                "losses": asdict(breakdown),
                "non_finite_grads": bad,
                "param_norms": {name: float(np.linalg.norm(p.data)) for name, p in params.items()},
            },
        )


# -- distillation ---------------------------------------------------------------

def episode_contexts(dataset: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator) -> List[PromptContext]:
    return [
        context_from_samples(*sample_episode(dataset, cfg.k_shots, rng, cfg.disjoint_episodes))
        for _ in range(cfg.batch)
    ]


def micro_batch_loss(model: TransformerModel, variant: VariantModel, contexts: Sequence[PromptContext], cfg: TrainConfig) -> Tuple[Tensor, LossBreakdown]:
    """Teacher ICL run, student run on the queries alone, and the combined loss."""
    teacher = model.icl_forward(contexts, cfg.align_point)
    student = variant.forward(np.stack([ctx.query_tokens for ctx in contexts]), cfg.align_point)
    if cfg.align_kind == "kl":
        start, end = contexts[0].answer_span
        align = kl_alignment_loss(student.logits, teacher.logits, np.arange(start - 1, end - 1))
    else:
        align = alignment_loss(student, teacher)
    gt = ground_truth_loss(student.logits, contexts)
    total = total_loss(align, gt, cfg.lam)
    return total, LossBreakdown(align.item(), gt.item(), total.item())


def train_step(
    model: TransformerModel,
    variant: VariantModel,
    optimizer: AdamW,
    micro_batches: Sequence[Sequence[PromptContext]],
    cfg: TrainConfig,
    step: int,
    lr: float,
) -> LossBreakdown:
    """Accumulate gradients over the micro-batches and apply one update."""
    optimizer.zero_grad()
    params = variant.parameters()
    parts = []
    for contexts in micro_batches:
        total, breakdown = micro_batch_loss(model, variant, contexts, cfg)
        if not math.isfinite(breakdown.total):
            _check_finite(breakdown, params, step, lr)
        backward(total / float(len(micro_batches)))
        parts.append(breakdown)
    n = float(len(parts))
    align = sum(p.align for p in parts) / n
    gt = sum(p.gt for p in parts) / n
    breakdown = LossBreakdown(align, gt, align + cfg.lam * gt)
    _check_finite(breakdown, params, step, lr)
    optimizer.step(lr)
    return breakdown


@dataclass
class TrainResult:
    steps: int
    best_epoch: int
    epoch_scores: List[float]
    history: List[LossBreakdown]

    @property
    def best_score(self) -> float:
        return self.epoch_scores[self.best_epoch] if self.epoch_scores else float("nan")


def train_loop(
    model: TransformerModel,
    variant: VariantModel,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    log=None,
    eval_fn: Optional[Callable[[VariantModel], float]] = None,
    progress: Optional[ProgressHook] = None,
) -> TrainResult:
    """Train the variant's parameters; with ``eval_fn`` the best epoch's parameters are kept."""
    params = variant.parameters()
    if not params:
        raise ConfigError(f"variant {variant.kind!r} has no trainable parameters")
    if any(p.requires_grad for p in model.parameters().values()):
        raise ConfigError("base model must be frozen before distillation")
    optimizer = AdamW(params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    per_step = cfg.batch * cfg.grad_accum
    steps_per_epoch = max(1, math.ceil(len(dataset) / per_step))
    total_steps = steps_per_epoch * cfg.epochs
    history: List[LossBreakdown] = []
    scores: List[float] = []
    best_state = None
    step = 0
    variant.train()
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            step += 1
            lr = lr_schedule(step, total_steps, cfg)
            micro = [episode_contexts(dataset, cfg, rng) for _ in range(cfg.grad_accum)]
            breakdown = train_step(model, variant, optimizer, micro, cfg, step, lr)
            history.append(breakdown)
            if log is not None:
                log.write(breakdown.record(step, lr))
            if progress is not None:
                progress({"status": "step", "step": step, "total": total_steps, "loss": breakdown.total, "lr": lr})
        if eval_fn is not None:
            variant.eval()
            scores.append(float(eval_fn(variant)))
            variant.train()
            logger.info("epoch %d: score %.4f", epoch + 1, scores[-1])
            if best_state is None or scores[-1] > max(scores[:-1]):
                best_state = copy.deepcopy(variant.state_arrays())
    variant.eval()
    best_epoch = int(np.argmax(scores)) if scores else cfg.epochs - 1
    if best_state is not None:
        variant.load_state_arrays(best_state)
    if progress is not None:
        progress({"status": "finished", "step": step, "total": total_steps})
    return TrainResult(step, best_epoch, scores, history)


def fit_patch_variant(
    model: TransformerModel,
    variant: VariantModel,
    support: Sequence[Sample],
    validation: Sequence[Sample],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Dict:
    """Extract the task or function vector and choose its layer (and heads) on validation accuracy."""
    patch = variant.intervention
    if not isinstance(patch, PatchVariant):
        raise ConfigError(f"variant {variant.kind!r} is not an activation patch")
    demos = [
        context_from_samples(*sample_episode(support, cfg.k_shots, rng, cfg.disjoint_episodes))
        for _ in range(cfg.patch_contexts)
    ]
    val_set: EvalSet = build_eval_set(validation, support, cfg.k_shots, rng)
    score = patched_scorer(model, val_set)
    fixed_layer = cfg.variant.patch_layer
    summary: Dict = {"kind": variant.kind}
    if variant.kind == "task_vector":
        if fixed_layer is None:
            layer, sweep = sweep_patch_layer(model, lambda l: tv_extract(model, demos, l), score, variant.kind)
            summary["layer_scores"] = sweep
        else:
            layer = fixed_layer
        vector = tv_extract(model, demos, layer)
    else:
        ranking_layer = fixed_layer if fixed_layer is not None else model.config.n_layers // 2
        heads = rank_heads(model, demos, ranking_layer, score)[: cfg.variant.fv_heads]
        vector = fv_extract(model, demos, heads)
        summary["heads"] = [list(h) for h in heads]
        if fixed_layer is None:
            layer, sweep = sweep_patch_layer(model, lambda l: vector, score, variant.kind)
            summary["layer_scores"] = sweep
        else:
            layer = fixed_layer
    patch.layer, patch.vector = layer, vector
    summary["layer"] = layer
    summary["validation_accuracy"] = score(patch)
    logger.info("%s patched at layer %d: validation accuracy %.3f", variant.kind, layer, summary["validation_accuracy"])
    return summary


# -- pretraining ----------------------------------------------------------------

def lm_loss(logits: Tensor, episodes: Sequence[Episode]) -> Tensor:
    """Cross-entropy of every determinable answer in the rendered episodes."""
    rows, cols, targets = [], [], []
    for b, ep in enumerate(episodes):
        for pos, target in ep.supervised_positions():
            rows.append(b)
            cols.append(pos)
            targets.append(target)
    picked = getitem(log_softmax(logits, axis=-1), (np.asarray(rows), np.asarray(cols), np.asarray(targets)))
    return -picked.mean()


def pretrain(
    model: TransformerModel,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    log=None,
    progress: Optional[ProgressHook] = None,
) -> List[float]:
    """Full-parameter training on the episode stream; the model is frozen again on return."""
    params = model.unfreeze().parameters()
    optimizer = AdamW(params, weight_decay=cfg.weight_decay)
    stream = generate_pretraining_stream(cfg, rng, model.config.vocab_size)
    losses = []
    try:
        for step in range(1, cfg.steps + 1):
            episodes = list(islice(stream, cfg.batch_size))
            tokens = np.stack([ep.render() for ep in episodes])
            optimizer.zero_grad()
            loss = lm_loss(model.forward(tokens).logits, episodes)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite pretraining loss at step {step}", {"step": step, "loss": value})
            backward(loss)
            norm = clip_grad_norm(params, cfg.grad_clip)
            lr = lr_schedule(step, cfg.steps, cfg)
            optimizer.step(lr)
            losses.append(value)
            if log is not None and (step % cfg.log_every == 0 or step == cfg.steps):
                log.write({"step": step, "lr": lr, "loss": value, "grad_norm": norm})
            if progress is not None:
                progress({"status": "step", "step": step, "total": cfg.steps, "loss": value, "lr": lr})
    finally:
        model.freeze()
    if progress is not None:
        progress({"status": "finished", "step": cfg.steps, "total": cfg.steps})
    return losses
