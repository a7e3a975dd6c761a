"""
Synthetic in-context mapping tasks.

Token layout: ``SEP`` (id 0) closes every demonstration block, alphabet
symbols start at id 1. A demonstration is ``[x, y, SEP]``, a training query
``[x, y]`` (answer span ``[1, 2)``) and an inference query ``[x]``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .model import PromptContext

logger = logging.getLogger(__name__)

SEP = 0
ALPHABET_START = 1
FAMILIES = ("permutation", "modular_offset")
ICD_STRATEGIES = ("random", "nearest")


@dataclass
class TaskConfig:
    family: str = "modular_offset"
    alphabet_size: int = 16
    mapping_seed: int = 0
    n_train: int = 200
    n_eval: int = 200
    eval_fraction: float = 0.25
    disjoint_eval: bool = True
    icd_strategy: str = "random"
    # existing JSON-lines datasets; empty strings generate the samples
    train_file: str = ""
    eval_file: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"task.family must be one of {FAMILIES}, got {self.family!r}")
        if self.alphabet_size < 2:
            raise ConfigError("task.alphabet_size must be at least 2")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError(f"task.eval_fraction must lie in (0, 1), got {self.eval_fraction}")
        if self.icd_strategy not in ICD_STRATEGIES:
            raise ConfigError(f"task.icd_strategy must be one of {ICD_STRATEGIES}")
        if bool(self.train_file) != bool(self.eval_file):
            raise ConfigError("task.train_file and task.eval_file must be set together")

    @property
    def from_files(self) -> bool:
        return bool(self.train_file)

    @classmethod
    def from_dict(cls, data: Dict) -> "TaskConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown task config keys: {sorted(unknown)}")
        return cls(**data)


def max_alphabet(vocab_size: int) -> int:
    return vocab_size - ALPHABET_START


@dataclass(frozen=True)
class MappingTask:
    """A bijection over ``alphabet``: a random permutation or a cyclic offset."""

    family: str
    alphabet: Tuple[int, ...]
    targets: Tuple[int, ...]
    task_id: str

    @classmethod
    def create(cls, family: str, alphabet_size: int, seed: int, vocab_size: int = 64) -> "MappingTask":
        return cls.sample(family, alphabet_size, np.random.default_rng(seed), vocab_size, f"{family}-m{alphabet_size}-s{seed}")

    @classmethod
    def sample(
        cls,
        family: str,
        alphabet_size: int,
        rng: np.random.Generator,
        vocab_size: int = 64,
        task_id: Optional[str] = None,
    ) -> "MappingTask":
        if family not in FAMILIES:
            raise ConfigError(f"unknown task family {family!r}")
        if alphabet_size > max_alphabet(vocab_size):
            raise DimensionError(f"alphabet of {alphabet_size} symbols does not fit vocab {vocab_size}")
        if family == "permutation":
            symbols = np.sort(rng.choice(max_alphabet(vocab_size), size=alphabet_size, replace=False)) + ALPHABET_START
            targets = symbols[rng.permutation(alphabet_size)]
        else:
            # the ring is always the first alphabet_size symbols so the offset is inferable
            symbols = np.arange(alphabet_size) + ALPHABET_START
            offset = int(rng.integers(1, alphabet_size))
            targets = np.roll(symbols, -offset)
        task_id = task_id or f"{family}-m{alphabet_size}-{int(rng.integers(1 << 30))}"
        return cls(family, tuple(int(s) for s in symbols), tuple(int(t) for t in targets), task_id)

    @property
    def size(self) -> int:
        return len(self.alphabet)

    @property
    def table(self) -> Dict[int, int]:
        return dict(zip(self.alphabet, self.targets))

    def apply(self, x: int) -> int:
        try:
            return self.table[int(x)]
        except KeyError:
            raise DimensionError(f"symbol {x} is outside the task alphabet") from None


@dataclass(frozen=True)
class Sample:
    x: int
    y: int
    task_id: str


@dataclass
class Episode:
    demos: List[Tuple[int, int]]
    query: int
    answer: int
    family: str = "permutation"

    @property
    def k(self) -> int:
        return len(self.demos)

    def render(self, with_answer: bool = True) -> np.ndarray:
        tokens: List[int] = []
        for x, y in self.demos:
            tokens += [x, y, SEP]
        tokens += [self.query, self.answer] if with_answer else [self.query]
        return np.asarray(tokens, dtype=np.int64)

    @classmethod
    def parse(cls, tokens: Sequence[int], family: str = "permutation") -> "Episode":
        """Inverse of ``render()``.

        The token layout does not carry the family, so a modular episode only
        parses back to an equal ``Episode`` when its family is passed in; the
        demonstrations, query and answer are recovered either way.
        """
        if family not in FAMILIES:
            raise ConfigError(f"unknown task family {family!r}")
        tokens = [int(t) for t in tokens]
        if len(tokens) < 2 or (len(tokens) - 2) % 3:
            raise DimensionError(f"cannot parse {len(tokens)} tokens as k blocks plus a query")
        demos = []
        for i in range(0, len(tokens) - 2, 3):
            x, y, sep = tokens[i:i + 3]
            if sep != SEP:
                raise DimensionError(f"expected separator at position {i + 2}, found {sep}")
            demos.append((x, y))
        return cls(demos, tokens[-2], tokens[-1], family)

    def context(self, with_answer: bool = True) -> PromptContext:
        icds = [np.asarray([x, y, SEP]) for x, y in self.demos]
        query = [self.query, self.answer] if with_answer else [self.query]
        span = (1, 2) if with_answer else (1, 1)
        return PromptContext(icds, np.asarray(query), span)

    def supervised_positions(self) -> List[Tuple[int, int]]:
        """(position, target) pairs whose answer is determined by the tokens before them.

        Position ``3 i`` holds demonstration i's input, so its logits predict
        that demonstration's output. A modular output is determined once any
        earlier pair fixes the offset; a permutation output only when the same
        input was demonstrated before.
        """
        pairs = []
        seen = set()
        for i, (x, y) in enumerate(self.demos):
            if (self.family == "modular_offset" and i > 0) or x in seen:
                pairs.append((3 * i, y))
            seen.add(x)
        pairs.append((3 * self.k, self.answer))
        return pairs


def context_from_samples(icds: Sequence[Sample], query: Sample, with_answer: bool = True) -> PromptContext:
    return Episode([(s.x, s.y) for s in icds], query.x, query.y).context(with_answer)


# -- pretraining stream -------------------------------------------------------

def generate_pretraining_stream(cfg, rng: np.random.Generator, vocab_size: int = 64) -> Iterator[Episode]:
    """Endless episodes, each with a freshly sampled mapping.

    Consecutive blocks of ``cfg.batch_size`` episodes share one k so they can
    be stacked, and families are drawn by ``cfg.family_weights``.
    Permutation demonstrations revisit about k/2 inputs so most of their
    answers are already determined, and the query repeats a demonstrated
    input; modular queries never do.
    """
    weights = np.asarray(cfg.family_weights or [1.0] * len(cfg.families), dtype=np.float64)
    weights = weights / weights.sum()
    while True:
        k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
        for _ in range(cfg.batch_size):
            family = cfg.families[int(rng.choice(len(cfg.families), p=weights))]
            task = MappingTask.sample(family, cfg.alphabet_size, rng, vocab_size)
            if family == "permutation":
                n_inputs = min(max(1, (k + 1) // 2), task.size)
            else:
                n_inputs = min(k, task.size - 1)
            inputs = rng.choice(task.alphabet, size=n_inputs, replace=False)
            if family == "permutation":
                query = int(rng.choice(inputs))
            else:
                rest = np.setdiff1d(task.alphabet, inputs)
                query = int(rng.choice(rest))
            demos = [(int(x), task.apply(x)) for x in inputs]
            while len(demos) < k:
                x = int(rng.choice(inputs))
                demos.append((x, task.apply(x)))
            yield Episode(demos, query, task.apply(query), family)


# -- task datasets ------------------------------------------------------------

def generate_task_dataset(
    task: MappingTask,
    n: int,
    rng: np.random.Generator,
    inputs: Optional[Sequence[int]] = None,
) -> List[Sample]:
    """``n`` labeled samples with inputs drawn uniformly from ``inputs`` (default: the alphabet)."""
    pool = np.asarray(task.alphabet if inputs is None else inputs)
    if pool.size == 0:
        raise DimensionError("no inputs to draw samples from")
    xs = rng.choice(pool, size=n, replace=True)
    return [Sample(int(x), task.apply(x), task.task_id) for x in xs]


@dataclass
class TaskData:
    task: MappingTask
    train: List[Sample]
    evaluation: List[Sample]
    train_inputs: Tuple[int, ...] = field(default=())
    eval_inputs: Tuple[int, ...] = field(default=())


def build_task_data(cfg: TaskConfig, rng: np.random.Generator, vocab_size: int = 64) -> TaskData:
    """Train and evaluation samples for one fixed mapping, optionally over disjoint inputs."""
    task = MappingTask.create(cfg.family, cfg.alphabet_size, cfg.mapping_seed, vocab_size)
    alphabet = np.asarray(task.alphabet)
    if cfg.disjoint_eval:
        order = rng.permutation(alphabet)
        n_eval_inputs = max(1, int(round(cfg.eval_fraction * task.size)))
        eval_inputs, train_inputs = order[:n_eval_inputs], order[n_eval_inputs:]
    else:
        eval_inputs = train_inputs = alphabet
    # evaluation samples are identical for every n_train
    evaluation = generate_task_dataset(task, cfg.n_eval, rng, eval_inputs)
    train = generate_task_dataset(task, cfg.n_train, rng, train_inputs)
    logger.info("task %s: %d train / %d eval samples", task.task_id, len(train), len(evaluation))
    return TaskData(task, train, evaluation, tuple(int(x) for x in train_inputs), tuple(int(x) for x in eval_inputs))


def save_dataset(samples: Sequence[Sample], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(asdict(s)) + "\n")
    return path


def load_dataset(path: Path) -> List[Sample]:
    with open(path, "r") as f:
        return [Sample(**json.loads(line)) for line in f if line.strip()]


def load_task_data(cfg: TaskConfig, vocab_size: int = 64, n_train: Optional[int] = None) -> TaskData:
    """Train and evaluation samples read from ``cfg.train_file`` and ``cfg.eval_file``.

    Every sample must carry the configured mapping's id and label. ``n_train``
    keeps the first n training samples; by default the whole file is used.
    """
    task = MappingTask.create(cfg.family, cfg.alphabet_size, cfg.mapping_seed, vocab_size)
    table = task.table
    splits = []
    for path in (cfg.train_file, cfg.eval_file):
        try:
            samples = load_dataset(Path(path).expanduser())
        except (OSError, ValueError, TypeError) as e:
            raise ConfigError(f"could not read dataset {path}: {e}") from e
        if not samples:
            raise ConfigError(f"dataset {path} holds no samples")
        bad = [s for s in samples if s.task_id != task.task_id or table.get(s.x) != s.y]
        if bad:
            raise ConfigError(f"dataset {path}: {len(bad)} samples do not follow mapping {task.task_id}")
        splits.append(samples)
    train, evaluation = splits
    if n_train is not None:
        if n_train > len(train):
            raise ConfigError(f"dataset {cfg.train_file} has {len(train)} samples, {n_train} requested")
        train = train[:n_train]
    logger.info("task %s: %d train / %d eval samples from files", task.task_id, len(train), len(evaluation))
    return TaskData(
        task, train, evaluation,
        tuple(sorted({s.x for s in train})), tuple(sorted({s.x for s in evaluation})),
    )


def split_by_input(
    samples: Sequence[Sample], fraction: float, rng: np.random.Generator
) -> Tuple[List[Sample], List[Sample]]:
    """(fit, held_out): every sample of ``round(fraction * inputs)`` inputs goes to held_out.

    At least one input is held out and at least one kept. With ``fraction``
    0 or a single distinct input nothing can be held out, and both parts are
    the full list.
    """
    inputs = np.unique([s.x for s in samples])
    if fraction <= 0 or inputs.size < 2:
        return list(samples), list(samples)
    n_held = min(max(1, int(round(fraction * inputs.size))), inputs.size - 1)
    held = {int(x) for x in rng.choice(inputs, size=n_held, replace=False)}
    return [s for s in samples if s.x not in held], [s for s in samples if s.x in held]


# -- demonstration selection --------------------------------------------------

def icd_selection(
    strategy: str,
    pool: Sequence[Sample],
    query: Sample,
    k: int,
    rng: np.random.Generator,
    embeddings: Optional[np.ndarray] = None,
    disjoint: bool = True,
) -> List[Sample]:
    """Pick k demonstrations for ``query`` from ``pool``.

    ``nearest`` ranks by cosine similarity of the input tokens' embedding
    rows and needs ``embeddings``; ``random`` draws uniformly. With
    ``disjoint`` samples sharing the query input are never chosen.
    """
    if strategy not in ICD_STRATEGIES:
        raise ConfigError(f"unknown ICD selection strategy {strategy!r}")
    candidates = [s for s in pool if not (disjoint and s.x == query.x)]
    if len(candidates) < k:
        raise DimensionError(f"pool of {len(candidates)} eligible samples cannot supply {k} demonstrations")
    if strategy == "random":
        idx = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[i] for i in idx]
    if embeddings is None:
        raise ConfigError("nearest ICD selection needs the token embedding table")
    target = embeddings[query.x]
    rows = embeddings[[s.x for s in candidates]]
    sims = rows @ target / (np.linalg.norm(rows, axis=1) * np.linalg.norm(target) + 1e-12)
    # stable sort keeps pool order among ties
    order = np.argsort(-sims, kind="stable")[:k]
    # most similar last, nearest the query
    return [candidates[i] for i in order[::-1]]


def lookup_oracle(episode: Episode, rng: Optional[np.random.Generator] = None, alphabet: Optional[Sequence[int]] = None) -> int:
    """Table lookup over the episode's own demonstrations; a random guess otherwise."""
    table = dict(episode.demos)
    if episode.query in table:
        return table[episode.query]
    if rng is None or alphabet is None:
        return -1
    return int(rng.choice(alphabet))
