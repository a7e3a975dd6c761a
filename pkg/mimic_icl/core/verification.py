"""
Self-checks run by ``mimic-icl verify``.

Suites: the attention decomposition identity on random instances and on a
model's own heads, the contract of the demonstration share mu,
neutral-initialization equivalence of every variant, and finite-difference
gradient checks of the primitive ops and of every trainable variant.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import numerics as nx
from .attention import SegmentedKeys, decomposed_icl_sa, mu
from .errors import VerificationError
from .model import HeadRecorder, ModelConfig, PromptContext, TransformerModel
from .numerics import Tensor, no_grad
from .training import alignment_loss, ground_truth_loss
from .variants import VARIANT_KINDS, VariantConfig, build_variant

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-9
NEUTRAL_TOLERANCE = 1e-12
GRAD_TOLERANCE = 1e-4

OpCase = Tuple[Callable[[Tensor], Tensor], Tuple[int, ...]]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int
    failures: List[str] = field(default_factory=list)


@dataclass
class VerificationReport:
    suites: List[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "suites": [asdict(s) for s in self.suites]}

    def raise_for_failures(self) -> None:
        failed = [s for s in self.suites if not s.passed]
        if failed:
            details = "; ".join(f"{s.name}: {', '.join(s.failures) or 'failed'}" for s in failed)
            raise VerificationError(f"verification failed ({details})")


def identity_suite(rng: np.random.Generator, n: int = 100) -> SuiteResult:
    worst, failures = 0.0, []
    for i in range(n):
        l_d, l_q, d_h = int(rng.integers(1, 17)), int(rng.integers(1, 9)), int(rng.integers(2, 33))
        report = decomposed_icl_sa(
            rng.normal(size=d_h),
            rng.normal(size=(l_d, d_h)), rng.normal(size=(l_d, d_h)),
            rng.normal(size=(l_q, d_h)), rng.normal(size=(l_q, d_h)),
        )
        worst = max(worst, report.max_abs_diff)
        if not report.max_abs_diff <= IDENTITY_TOLERANCE:
            failures.append(f"instance {i} (l_D={l_d}, l_q={l_q}, d_h={d_h})")
    return SuiteResult("decomposition_identity", not failures, worst, IDENTITY_TOLERANCE, n, failures)


def mu_bounds_suite(rng: np.random.Generator, n: int = 100, delta: float = 0.5) -> SuiteResult:
    failures = []
    for i in range(n):
        l_d, l_q, d_h = int(rng.integers(1, 17)), int(rng.integers(1, 9)), int(rng.integers(2, 33))
        q = rng.normal(size=d_h)
        k_demo, k_query = rng.normal(size=(l_d, d_h)), rng.normal(size=(l_q, d_h))
        share = mu(q, k_demo, k_query).item()
        if not 0.0 < share < 1.0:
            failures.append(f"instance {i}: mu={share} outside (0, 1)")
        if mu(q, None, k_query).item() != 0.0:
            failures.append(f"instance {i}: mu nonzero without demonstrations")
        # shifting every demonstration key along q raises each demonstration score by delta
        boosted = k_demo + delta * math.sqrt(d_h) * q / float(q @ q)
        if not mu(q, boosted, k_query).item() > share:
            failures.append(f"instance {i}: mu not increasing under a demonstration score boost")
    return SuiteResult("mu_contract", not failures, float(len(failures)), 0.0, n, failures)


def tiny_model(seed: int = 0) -> TransformerModel:
    config = ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=12, max_len=16, ffn_mult=2, seed=seed)
    return TransformerModel(config).freeze()


def _random_tokens(rng: np.random.Generator, model: TransformerModel, batch: int, length: int) -> np.ndarray:
    return rng.integers(0, model.config.vocab_size, size=(batch, length))


def model_identity_suite(rng: np.random.Generator, model: Optional[TransformerModel] = None) -> SuiteResult:
    """The decomposition identity on a model's own heads, every query row of every layer."""
    model = model or tiny_model(int(rng.integers(1 << 16)))
    vocab = model.config.vocab_size
    ctx = PromptContext([rng.integers(1, vocab, size=3) for _ in range(2)], rng.integers(1, vocab, size=2), (1, 2))
    recorder = HeadRecorder()
    with no_grad():
        model.forward(ctx.tokens, recorder)
    worst, failures, cases = 0.0, [], 0
    for layer, acts in enumerate(recorder.acts):
        q, k, v, sa = acts.q.data[0], acts.k.data[0], acts.v.data[0], acts.sa.data[0]
        for h in range(acts.n_heads):
            for row in range(ctx.boundary, len(ctx)):
                report = SegmentedKeys.split(k[h], v[h], ctx.boundary, row).decompose(q[h, row])
                diff = max(report.max_abs_diff, float(np.max(np.abs(report.combined - sa[h, row]))))
                worst = max(worst, diff)
                cases += 1
                if not diff <= IDENTITY_TOLERANCE:
                    failures.append(f"layer {layer} head {h} row {row}")
    return SuiteResult("model_decomposition", not failures, worst, IDENTITY_TOLERANCE, cases, failures)


def zero_shift_suite(rng: np.random.Generator, model: Optional[TransformerModel] = None) -> SuiteResult:
    model = model or tiny_model(int(rng.integers(1 << 16)))
    tokens = _random_tokens(rng, model, 2, 6)
    with no_grad():
        base = model.forward(tokens)
        worst, failures = 0.0, []
        for kind in VARIANT_KINDS:
            variant = build_variant(VariantConfig(kind=kind), model, np.random.default_rng(0), neutral=True).eval()
            trace = variant.forward(tokens)
            diffs = [np.max(np.abs(a.data - b.data)) for a, b in zip(trace.after_ffn + [trace.logits], base.after_ffn + [base.logits])]
            diff = float(max(diffs))
            worst = max(worst, diff)
            if kind in ("task_vector", "function_vector"):
                if not all(np.array_equal(a.data, b.data) for a, b in zip(trace.after_ffn, base.after_ffn)):
                    failures.append(f"{kind}: zero patch is not bit-identical")
            elif diff > NEUTRAL_TOLERANCE:
                failures.append(f"{kind}: max deviation {diff:.3e}")
    return SuiteResult("zero_shift_equivalence", not failures, worst, NEUTRAL_TOLERANCE, len(VARIANT_KINDS), failures)


def default_op_cases(rng: np.random.Generator) -> Dict[str, OpCase]:
    """One scalar-valued check function per primitive, keyed by op name."""
    w = rng.normal(size=(3, 4))
    other = rng.normal(size=(3, 4))
    right = rng.normal(size=(4, 2))
    w_right = rng.normal(size=(3, 2))
    gain = rng.normal(size=4)
    cos, sin = np.cos(rng.normal(size=(3, 4))), np.sin(rng.normal(size=(3, 4)))
    return {
        "add": (lambda x: nx.tsum(nx.add(x, other) * w), (3, 4)),
        "sub": (lambda x: nx.tsum(nx.sub(other, x) * w), (3, 4)),
        "mul": (lambda x: nx.tsum(nx.mul(x, x) * w), (3, 4)),
        "div": (lambda x: nx.tsum(nx.div(x, x * x + 1.0) * w), (3, 4)),
        "power": (lambda x: nx.tsum(nx.power(x * x + 1.0, 1.5) * w), (3, 4)),
        "exp": (lambda x: nx.tsum(nx.exp(x) * w), (3, 4)),
        "log": (lambda x: nx.tsum(nx.log(x * x + 0.5) * w), (3, 4)),
        "logistic": (lambda x: nx.tsum(nx.logistic(x) * w), (3, 4)),
        "relu": (lambda x: nx.tsum(nx.relu(x) * w), (3, 4)),
        "maximum": (lambda x: nx.tsum(nx.maximum(x, other) * w), (3, 4)),
        "gelu": (lambda x: nx.tsum(nx.gelu(x) * w), (3, 4)),
        "matmul": (lambda x: nx.tsum(nx.matmul(x, right) * w_right), (3, 4)),
        "sum": (lambda x: nx.tsum(x.sum(axis=1) ** 2), (3, 4)),
        "mean": (lambda x: nx.tsum(nx.mean(x, axis=0) ** 2), (3, 4)),
        "reshape": (lambda x: nx.tsum(nx.reshape(x, (4, 3)) * w.reshape(4, 3)), (3, 4)),
        "transpose": (lambda x: nx.tsum(nx.transpose(x) * w.T), (3, 4)),
        "getitem": (lambda x: nx.tsum(nx.getitem(x, (np.array([0, 2, 2]), np.array([1, 3, 3]))) ** 2), (3, 4)),
        "concat": (lambda x: nx.tsum(nx.concat([x, x * 2.0], axis=0) ** 2), (3, 4)),
        "rotary": (lambda x: nx.tsum(nx.rotate_pairs(x, cos, sin) * w), (3, 4)),
        "softmax": (lambda x: nx.tsum(nx.softmax(x, axis=-1) * w), (3, 4)),
        "log_sum_exp": (lambda x: nx.tsum(nx.log_sum_exp(x, axis=-1) ** 2), (3, 4)),
        "log_softmax": (lambda x: nx.tsum(nx.log_softmax(x, axis=-1) * w), (3, 4)),
        "rms_norm": (lambda x: nx.tsum(nx.rms_norm(x, gain) * w), (3, 4)),
    }


def grad_op_suite(rng: np.random.Generator, ops: Optional[Mapping[str, OpCase]] = None) -> SuiteResult:
    ops = ops if ops is not None else default_op_cases(rng)
    worst, failures = 0.0, []
    for name, (fn, shape) in ops.items():
        err = nx.grad_check(fn, rng.normal(size=shape))
        worst = max(worst, err)
        if not err <= GRAD_TOLERANCE:
            failures.append(f"{name} (relative error {err:.2e})")
    return SuiteResult("gradient_ops", not failures, worst, GRAD_TOLERANCE, len(ops), failures)


def grad_variant_suite(rng: np.random.Generator, points: int = 20) -> SuiteResult:
    model = tiny_model(int(rng.integers(1 << 16)))
    ctx = PromptContext(
        [rng.integers(1, model.config.vocab_size, size=3) for _ in range(2)],
        rng.integers(1, model.config.vocab_size, size=2),
        (1, 2),
    )
    teacher = model.icl_forward(ctx)
    kinds = [k for k in VARIANT_KINDS if VariantConfig(kind=k).trainable]
    worst, failures = 0.0, []
    for kind in kinds:
        variant = build_variant(VariantConfig(kind=kind), model, np.random.default_rng(1)).eval()
        params = variant.parameters()
        for p in params.values():
            p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)

        def loss_fn() -> Tensor:
            student = variant.forward(ctx.query_tokens[None])
            return alignment_loss(student, teacher) + 0.5 * ground_truth_loss(student.logits, ctx)

        for name, err in nx.grad_check_params(loss_fn, params, eps=1e-6, points=points, rng=rng).items():
            worst = max(worst, err)
            if not err <= GRAD_TOLERANCE:
                failures.append(f"{kind}:{name} (relative error {err:.2e})")
    return SuiteResult("gradient_variants", not failures, worst, GRAD_TOLERANCE, len(kinds), failures)


def run_verification(
    seed: int = 0,
    identity_instances: int = 100,
    ops: Optional[Mapping[str, OpCase]] = None,
    include_variants: bool = True,
) -> VerificationReport:
    rng = np.random.default_rng(seed)
    suites = [
        identity_suite(rng, identity_instances),
        model_identity_suite(rng),
        mu_bounds_suite(rng),
        zero_shift_suite(rng),
        grad_op_suite(rng, ops),
    ]
    if include_variants:
        suites.append(grad_variant_suite(rng))
    for suite in suites:
        logger.info("%s: %s (max error %.3e over %d cases)", suite.name, "ok" if suite.passed else "FAILED", suite.max_error, suite.cases)
    return VerificationReport(suites)
