"""
Evaluation of the base model, its ICL runs and trained variants.

All predictions decode greedily the token predicted at the query input
position, i.e. the first answer token.
"""

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .model import ALIGN_POINTS, Intervention, PromptContext, TransformerModel
from .numerics import no_grad
from .tasks import Episode, MappingTask, Sample, TaskData, context_from_samples, icd_selection
from .variants import VARIANT_KINDS, VariantModel

logger = logging.getLogger(__name__)

BASE_MODES = ("zero_shot", "k_shot_icl")


@dataclass
class EvalConfig:
    n_eval: int = 200
    k_shots: int = 8
    shots: List[int] = field(default_factory=lambda: [1, 4, 8])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: List[str] = field(
        default_factory=lambda: [
            "zero_shot", "k_shot_icl", "mimic", "head_sharing_mu", "query_sharing_mu",
            "live_style", "task_vector", "function_vector", "lora",
        ]
    )
    train_sizes: List[int] = field(default_factory=lambda: [200])
    align_points: List[str] = field(default_factory=lambda: ["after_ffn"])
    order_permutations: int = 4
    latency_queries: int = 64
    latency_repeats: int = 5
    measure_latency: bool = False

    def __post_init__(self):
        if self.n_eval < 1 or self.k_shots < 1 or any(k < 1 for k in self.shots):
            raise ConfigError("eval sample and shot counts must be positive")
        unknown = [v for v in self.variants if v not in VARIANT_KINDS + BASE_MODES]
        if unknown:
            raise ConfigError(f"unknown variants in eval.variants: {unknown}")
        bad = [a for a in self.align_points if a not in ALIGN_POINTS]
        if bad:
            raise ConfigError(f"unknown align points in eval.align_points: {bad}")

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EvalSet:
    """k-shot inference contexts for a list of queries with their answers."""

    contexts: List[PromptContext]
    answers: np.ndarray
    k: int

    def __len__(self) -> int:
        return len(self.contexts)

    def query_tokens(self) -> np.ndarray:
        return np.stack([ctx.query_tokens for ctx in self.contexts])

    def icl_tokens(self) -> np.ndarray:
        return np.stack([ctx.tokens for ctx in self.contexts])

    def tokens_per_query(self, mode: str) -> int:
        ctx = self.contexts[0]
        return len(ctx) if mode == "k_shot_icl" else len(ctx.query_tokens)


def build_eval_set(
    queries: Sequence[Sample],
    support: Sequence[Sample],
    k: int,
    rng: np.random.Generator,
    strategy: str = "random",
    embeddings: Optional[np.ndarray] = None,
    n: Optional[int] = None,
) -> EvalSet:
    queries = list(queries)[:n] if n is not None else list(queries)
    if not queries:
        raise DimensionError("evaluation needs at least one query")
    contexts = [
        context_from_samples(icd_selection(strategy, support, q, k, rng, embeddings), q, with_answer=False)
        for q in queries
    ]
    return EvalSet(contexts, np.asarray([q.y for q in queries]), k)


def predict_next(model: TransformerModel, tokens: np.ndarray, intervention: Optional[Intervention] = None) -> np.ndarray:
    with no_grad():
        trace = model.forward(tokens, intervention)
    return trace.logits.data[:, -1, :].argmax(axis=-1)


Predictor = Callable[[EvalSet], np.ndarray]


def mode_predictor(model: TransformerModel, mode: str, variant: Optional[VariantModel] = None) -> Predictor:
    if mode == "zero_shot":
        return lambda es: predict_next(model, es.query_tokens())
    if mode == "k_shot_icl":
        return lambda es: predict_next(model, es.icl_tokens())
    if variant is None:
        raise ConfigError(f"mode {mode!r} needs a trained variant")
    variant.eval()
    return lambda es: predict_next(model, es.query_tokens(), variant.intervention)


@dataclass
class EvalReport:
    mode: str
    k: int
    seed: int
    accuracy: float
    n: int
    tokens: int
    l2_per_layer: List[float] = field(default_factory=list)
    cosine_per_layer: List[float] = field(default_factory=list)
    latency_s: Optional[float] = None
    order_sensitivity: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2_per_layer)) if self.l2_per_layer else float("nan")

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosine_per_layer)) if self.cosine_per_layer else float("nan")

    def row(self) -> Dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "mean_l2": self.mean_l2,
            "mean_cosine": self.mean_cosine,
            "latency_s": self.latency_s if self.latency_s is not None else float("nan"),
            "tokens": self.tokens,
            "n": self.n,
            "order_sensitivity": self.order_sensitivity if self.order_sensitivity is not None else float("nan"),
            "l2_layers": " ".join(f"{v:.6g}" for v in self.l2_per_layer),
            "cosine_layers": " ".join(f"{v:.6g}" for v in self.cosine_per_layer),
        }


def accuracy(predictions: np.ndarray, answers: np.ndarray) -> float:
    predictions, answers = np.asarray(predictions), np.asarray(answers)
    if predictions.shape != answers.shape:
        raise DimensionError(f"{predictions.shape} predictions for {answers.shape} answers")
    return float(np.mean(predictions == answers)) if answers.size else 0.0


def evaluate_accuracy(
    model: TransformerModel,
    data: TaskData,
    mode: str,
    shots: int,
    n_eval: int,
    rng: np.random.Generator,
    variant: Optional[VariantModel] = None,
    strategy: str = "random",
    predictor: Optional[Predictor] = None,
    seed: int = 0,
) -> EvalReport:
    """Exact-match accuracy of ``mode`` on ``n_eval`` held-out queries.

    ``predictor`` replaces the model-backed decoder (used for oracles).
    """
    embeddings = model.embed_tokens(np.arange(model.config.vocab_size)) if strategy == "nearest" else None
    eval_set = build_eval_set(data.evaluation, data.train, shots, rng, strategy, embeddings, n_eval)
    predict = predictor or mode_predictor(model, mode, variant)
    acc = accuracy(predict(eval_set), eval_set.answers)
    logger.info("%s k=%d: accuracy %.3f over %d queries", mode, shots, acc, len(eval_set))
    return EvalReport(mode, shots, seed, acc, len(eval_set), eval_set.tokens_per_query(mode))


def _query_hidden(model: TransformerModel, eval_set: EvalSet, mode: str, variant: Optional[VariantModel], align_point: str) -> List[np.ndarray]:
    with no_grad():
        if mode == "k_shot_icl":
            trace = model.icl_forward(eval_set.contexts, align_point)
        elif mode == "zero_shot":
            trace = model.forward(eval_set.query_tokens(), None, align_point)
        else:
            if variant is None:
                raise ConfigError(f"mode {mode!r} needs a trained variant")
            trace = model.forward(eval_set.query_tokens(), variant.intervention, align_point)
    return [h.data[:, -1, :] for h in trace.hidden]


def alignment_distance_report(
    model: TransformerModel,
    eval_set: EvalSet,
    mode: str,
    variant: Optional[VariantModel] = None,
    align_point: str = "after_ffn",
) -> Dict[str, np.ndarray]:
    """Per-layer mean L2 distance and cosine similarity of the first answer token to k-shot ICL."""
    reference = _query_hidden(model, eval_set, "k_shot_icl", None, align_point)
    hidden = _query_hidden(model, eval_set, mode, variant, align_point)
    l2, cosine = [], []
    for ref, h in zip(reference, hidden):
        l2.append(float(np.mean(np.linalg.norm(h - ref, axis=-1))))
        denom = np.linalg.norm(h, axis=-1) * np.linalg.norm(ref, axis=-1)
        cos = np.sum(h * ref, axis=-1) / np.maximum(denom, 1e-12)
        cosine.append(float(np.mean(np.clip(cos, -1.0, 1.0))))
    return {"l2": np.asarray(l2), "cosine": np.asarray(cosine)}


def order_sensitivity(model: TransformerModel, eval_set: EvalSet, rng: np.random.Generator, n_perm: int = 4) -> float:
    """Fraction of k-shot predictions that change when the demonstrations are shuffled."""
    if eval_set.k < 2 or n_perm < 1:
        return 0.0
    baseline = predict_next(model, eval_set.icl_tokens())
    changed = 0
    for _ in range(n_perm):
        shuffled = []
        for ctx in eval_set.contexts:
            order = rng.permutation(ctx.k)
            shuffled.append(PromptContext([ctx.icd_tokens[i] for i in order], ctx.query_tokens, ctx.answer_span))
        changed += int(np.sum(predict_next(model, np.stack([c.tokens for c in shuffled])) != baseline))
    return changed / (n_perm * len(eval_set))


def latency_bench(
    model: TransformerModel,
    eval_set: EvalSet,
    variant: Optional[VariantModel] = None,
    repeats: int = 5,
) -> List[Dict]:
    """Mean wall-clock seconds per query for each inference mode, one batched forward per repeat."""
    modes = ["k_shot_icl", "zero_shot"] + ([variant.kind] if variant is not None else [])
    rows = []
    for mode in modes:
        predict = mode_predictor(model, mode, variant)
        predict(eval_set)
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            predict(eval_set)
            timings.append(time.perf_counter() - start)
        rows.append({
            "mode": mode,
            "k": eval_set.k,
            "latency_s": float(np.mean(timings)) / len(eval_set),
            "tokens": eval_set.tokens_per_query(mode),
            "n": len(eval_set),
        })
    icl = rows[0]["latency_s"]
    for row in rows:
        row["speedup"] = icl / row["latency_s"] if row["latency_s"] > 0 else float("inf")
    return rows


def patched_scorer(model: TransformerModel, eval_set: EvalSet) -> Callable[[Intervention], float]:
    """Zero-shot accuracy with an activation patch applied."""
    tokens = eval_set.query_tokens()
    return lambda patch: accuracy(predict_next(model, tokens, patch), eval_set.answers)


def evaluate_mode(
    model: TransformerModel,
    eval_set: EvalSet,
    mode: str,
    seed: int = 0,
    variant: Optional[VariantModel] = None,
    align_point: str = "after_ffn",
    rng: Optional[np.random.Generator] = None,
    order_permutations: int = 0,
) -> EvalReport:
    """Accuracy, distances to k-shot ICL and (for ICL with ``rng``) order sensitivity on one shared set."""
    predictions = mode_predictor(model, mode, variant)(eval_set)
    distances = alignment_distance_report(model, eval_set, mode, variant, align_point)
    report = EvalReport(
        mode, eval_set.k, seed, accuracy(predictions, eval_set.answers), len(eval_set),
        eval_set.tokens_per_query(mode), list(distances["l2"]), list(distances["cosine"]),
    )
    if mode == "k_shot_icl" and rng is not None and order_permutations:
        report.order_sensitivity = order_sensitivity(model, eval_set, rng, order_permutations)
    return report


def held_out_icl_accuracy(
    model: TransformerModel, family: str, alphabet_size: int, k: int, n: int, rng: np.random.Generator
) -> float:
    """k-shot accuracy on freshly sampled mappings with queries outside the demonstrations."""
    episodes = []
    for _ in range(n):
        task = MappingTask.sample(family, alphabet_size, rng, model.config.vocab_size)
        inputs = rng.permutation(task.alphabet)
        query, shown = int(inputs[0]), inputs[1:k + 1]
        if family == "permutation":
            # a permutation is only recoverable for demonstrated inputs
            query = int(rng.choice(shown))
        episodes.append(Episode([(int(x), task.apply(x)) for x in shown], query, task.apply(query), family))
    tokens = np.stack([ep.render(with_answer=False) for ep in episodes])
    return accuracy(predict_next(model, tokens), np.asarray([ep.answer for ep in episodes]))
