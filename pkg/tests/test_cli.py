import json

import pandas as pd
import pytest
from click.testing import CliRunner

from mimic_icl.cli.ablate import main as ablate_main
from mimic_icl.cli.config_manager import cli as config_cli
from mimic_icl.cli.run import EXIT_CONFIG, EXIT_RUNTIME, cli
from mimic_icl.core.pipeline import Experiment


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def base_args(tmp_path, tiny_overrides):
    args = ["-o", str(tmp_path / "out")]
    for key, value in tiny_overrides.items():
        args += ["--set", f"{key}={json.dumps(value)}"]
    return args


def test_train_without_base_is_a_runtime_error(runner, base_args):
    result = runner.invoke(cli, base_args + ["train", "--variant", "mimic"])
    assert result.exit_code == EXIT_RUNTIME
    assert "pretrain" in result.output


def test_bad_override_is_a_config_error(runner, base_args):
    result = runner.invoke(cli, base_args + ["--set", "train.lam=-1", "verify"])
    assert result.exit_code == EXIT_CONFIG
    assert "train.lam" in result.output


def test_malformed_set_option(runner):
    result = runner.invoke(cli, ["--set", "train.lam", "verify"])
    assert result.exit_code == 2


@pytest.mark.parametrize("args", [
    ["eval", "--variants", "prompt_tuning"],
    ["ablate", "--shots", "0"],
    ["ablate", "--seeds", "a-b"],
])
def test_bad_grid_options(runner, base_args, args):
    assert runner.invoke(cli, base_args + args).exit_code == 2


def test_verify_writes_report(runner, base_args, tmp_path):
    result = runner.invoke(cli, base_args + ["verify", "--skip-variants", "--instances", "5"])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert report["passed"] is True
    assert "decomposition_identity" in result.output


def test_report_aggregates_seeds(runner, tmp_path):
    rows = [
        {"mode": "mimic", "k": 4, "seed": 0, "accuracy": 0.5},
        {"mode": "mimic", "k": 4, "seed": 1, "accuracy": 0.7},
        {"mode": "zero_shot", "k": 4, "seed": 0, "accuracy": 0.1},
    ]
    csv = tmp_path / "runs.csv"
    pd.DataFrame(rows).to_csv(csv, index=False)
    out = tmp_path / "summary" / "summary.csv"
    result = runner.invoke(cli, ["report", str(csv), "--out", str(out)])
    assert result.exit_code == 0, result.output
    summary = pd.read_csv(out).set_index("mode")
    assert summary.loc["mimic", "accuracy_mean"] == pytest.approx(0.6)
    assert summary.loc["mimic", "runs"] == 2


def test_report_rejects_missing_columns(runner, tmp_path):
    csv = tmp_path / "bad.csv"
    pd.DataFrame([{"mode": "mimic", "seed": 0}]).to_csv(csv, index=False)
    result = runner.invoke(cli, ["report", str(csv)])
    assert result.exit_code == EXIT_CONFIG


def test_ablate_rejects_unknown_align_point(runner, base_args):
    result = runner.invoke(ablate_main, base_args + ["--align-points", "after_norm"])
    assert result.exit_code == 2
    assert "after_norm" in result.output


def test_unexpected_errors_exit_with_runtime_code(runner, base_args, monkeypatch):
    def fail(self, progress=None):
        raise OSError("disk full")

    monkeypatch.setattr(Experiment, "pretrain", fail)
    result = runner.invoke(cli, base_args + ["pretrain"])
    assert result.exit_code == EXIT_RUNTIME
    assert "OSError" in result.output and "disk full" in result.output


def test_run_ablate_validates_grid_axes(runner, base_args):
    result = runner.invoke(cli, base_args + ["ablate", "--align-points", "after_norm"])
    assert result.exit_code == 2
    assert "after_norm" in result.output
    assert runner.invoke(cli, base_args + ["ablate", "--train-sizes", "0"]).exit_code == 2


def test_config_manager_set_show_reset(runner, tmp_path):
    path = tmp_path / "exp.json"
    result = runner.invoke(config_cli, ["-c", str(path), "set", "train.lr", "0.01"])
    assert result.exit_code == 0, result.output
    assert json.loads(path.read_text())["train"]["lr"] == 0.01

    result = runner.invoke(config_cli, ["-c", str(path), "show", "train"])
    assert "train.lr" in result.output and "0.01" in result.output

    result = runner.invoke(config_cli, ["-c", str(path), "reset", "--key", "train.lr"])
    assert result.exit_code == 0
    assert json.loads(path.read_text())["train"]["lr"] == 5e-3


def test_config_manager_rejects_bad_values(runner, tmp_path):
    path = tmp_path / "exp.json"
    assert runner.invoke(config_cli, ["-c", str(path), "set", "train.epochs", "many"]).exit_code == 2
    assert runner.invoke(config_cli, ["-c", str(path), "set", "train.momentum", "0.9"]).exit_code == 2
    assert not path.exists()


def test_config_manager_lists_variants(runner):
    result = runner.invoke(config_cli, ["variants"])
    assert result.exit_code == 0
    assert "mimic_plus_lora" in result.output
    assert "task_vector" in result.output and "extracted" in result.output


@pytest.mark.slow
def test_pretrain_train_eval_end_to_end(runner, base_args, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(cli, base_args + ["pretrain"])
    assert result.exit_code == 0, result.output
    assert (out / "base.json").exists()

    result = runner.invoke(cli, base_args + ["train", "--variant", "mimic", "--shots", "2"])
    assert result.exit_code == 0, result.output
    assert (out / "variants" / "mimic-k2-s0.json").exists()

    result = runner.invoke(cli, base_args + ["eval", "--variants", "mimic", "--shots", "2"])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "eval-k2-s0.csv")
    assert list(table.columns[:8]) == ["mode", "k", "seed", "accuracy", "mean_l2", "mean_cosine", "latency_s", "tokens"]
    assert list(table["mode"]) == ["zero_shot", "k_shot_icl", "mimic"]

    result = runner.invoke(cli, base_args + ["eval", "--variants", "lora", "--shots", "2"])
    assert result.exit_code == EXIT_RUNTIME
    assert "mimic-icl train --variant lora" in result.output
