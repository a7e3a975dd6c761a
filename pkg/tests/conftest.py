import numpy as np
import pytest

from mimic_icl.core.model import PromptContext
from mimic_icl.core.tasks import MappingTask, Sample
from mimic_icl.core.verification import tiny_model


@pytest.fixture
def model():
    """Two layers, two heads, d=8, vocab 12: small enough for exact checks."""
    return tiny_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def task():
    return MappingTask.create("permutation", 8, 0, vocab_size=12)


@pytest.fixture
def samples(task):
    return [Sample(x, task.apply(x), task.task_id) for x in task.alphabet]


@pytest.fixture
def context():
    return PromptContext([np.array([1, 2, 0]), np.array([3, 4, 0])], np.array([5, 6]), (1, 2))


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    """Keep ~/.mimic-icl and the default output directory out of the real home."""
    monkeypatch.setenv("HOME", str(tmp_path / "home"))
    monkeypatch.setenv("MIMIC_ICL_OUTPUT", str(tmp_path / "outputs"))
    return tmp_path / "home"


TINY_OVERRIDES = {
    "model.n_layers": 2,
    "model.n_heads": 2,
    "model.d_model": 8,
    "model.vocab_size": 12,
    "model.max_len": 32,
    "model.ffn_mult": 2,
    "pretrain.steps": 2,
    "pretrain.batch_size": 2,
    "pretrain.k_min": 2,
    "pretrain.k_max": 2,
    "pretrain.alphabet_size": 6,
    "task.alphabet_size": 8,
    "task.n_train": 16,
    "task.n_eval": 8,
    "train.k_shots": 2,
    "train.epochs": 1,
    "train.batch": 2,
    "train.grad_accum": 1,
    "train.patch_contexts": 4,
    "eval.n_eval": 8,
    "eval.k_shots": 2,
    "eval.shots": [2],
    "eval.seeds": [0],
    "eval.train_sizes": [16],
    "eval.order_permutations": 1,
    "eval.latency_queries": 4,
    "eval.latency_repeats": 1,
}


@pytest.fixture(scope="session")
def tiny_overrides():
    return dict(TINY_OVERRIDES)
