"""
Experiment orchestration shared by the ``mimic-icl`` and ``mimic-icl-ablate``
commands: where artifacts live, which random stream feeds which stage, and
how a pretrain / train / eval / bench step is assembled from the core modules.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..utils.progress import TrainingLog
from ..utils.reporting import stamp, write_json
from ..utils.seeding import substream, substream_seed
from .checkpoint import load_base, load_variant, save_base, save_variant
from .config import Config
from .errors import NonFiniteError
from .evaluation import (
    BASE_MODES,
    EvalReport,
    accuracy,
    build_eval_set,
    evaluate_mode,
    held_out_icl_accuracy,
    latency_bench,
    predict_next,
)
from .model import TransformerModel
from .numerics import Tensor, dump_csv
from .tasks import TaskData, build_task_data, load_task_data, save_dataset, split_by_input
from .training import fit_patch_variant, pretrain, train_loop
from .variants import VariantModel, build_variant

logger = logging.getLogger(__name__)


@dataclass
class TrainOutcome:
    variant: VariantModel
    checkpoint: Path
    summary: Dict


class Experiment:
    """Artifacts of one configuration under its output directory."""

    def __init__(self, config: Config, output_dir: Optional[Path] = None):
        self.config = config
        self.output = Path(output_dir) if output_dir is not None else config.get_output_path()
        self.output.mkdir(parents=True, exist_ok=True)
        self.config_hash = config.config_hash()

    @property
    def seed(self) -> int:
        return self.config.seed

    def stamp(self, seed: Optional[int] = None) -> Dict[str, object]:
        return stamp(self.config_hash, self.seed if seed is None else seed)

    @property
    def base_path(self) -> Path:
        return self.output / "base.json"

    def variant_path(self, kind: str, k: int, seed: int, train_size: Optional[int] = None, align_point: Optional[str] = None) -> Path:
        name = f"{kind}-k{k}-s{seed}"
        if train_size is not None:
            name += f"-n{train_size}"
        if align_point is not None:
            name += f"-{align_point}"
        return self.output / "variants" / f"{name}.json"

    def load_base(self) -> TransformerModel:
        return load_base(self.base_path)

    def dataset_dir(self, seed: int, n_train: Optional[int] = None) -> Path:
        return self.output / "data" / (f"s{seed}" if n_train is None else f"s{seed}-n{n_train}")

    def task_data(self, seed: int, n_train: Optional[int] = None) -> TaskData:
        """The task samples of ``seed``.

        Configured dataset files are read as they are (the seed does not change
        them); generated samples are also written to ``dataset_dir`` as
        ``train.jsonl`` and ``eval.jsonl``.
        """
        task_cfg = self.config.task_config()
        vocab_size = self.config.model_config().vocab_size
        if task_cfg.from_files:
            return load_task_data(task_cfg, vocab_size, n_train)
        if n_train is not None:
            task_cfg = replace(task_cfg, n_train=n_train)
        data = build_task_data(task_cfg, substream(seed, "task"), vocab_size)
        directory = self.dataset_dir(seed, n_train)
        save_dataset(data.train, directory / "train.jsonl")
        save_dataset(data.evaluation, directory / "eval.jsonl")
        return data

    def dump_nonfinite(self, error: NonFiniteError, params: Dict[str, Tensor], seed: int) -> Path:
        """Diagnostics JSON plus one CSV per parameter under debug/; checkpoints stay untouched."""
        debug = self.output / "debug"
        for name, p in params.items():
            dump_csv(p, debug / f"{name}.csv")
        return write_json({"error": str(error), "diagnostics": error.diagnostics}, debug / "nonfinite.json", self.stamp(seed))

    # -- stages ------------------------------------------------------------------

    def pretrain(self, progress=None) -> Dict:
        model_cfg = replace(self.config.model_config(), seed=substream_seed(self.seed, "init"))
        model = TransformerModel(model_cfg)
        pcfg = self.config.pretrain_config()
        try:
            with TrainingLog(self.output / "logs" / "pretrain.jsonl") as log:
                losses = pretrain(model, pcfg, substream(self.seed, "pretrain"), log, progress)
        except NonFiniteError as e:
            self.dump_nonfinite(e, model.parameters(), self.seed)
            raise
        task_cfg = self.config.task_config()
        icl_accuracy = held_out_icl_accuracy(
            model, task_cfg.family, task_cfg.alphabet_size, self.config.eval_config().k_shots,
            self.config.eval_config().n_eval, substream(self.seed, "eval"),
        )
        summary = {"final_loss": losses[-1], "steps": len(losses), "held_out_icl_accuracy": icl_accuracy}
        save_base(self.base_path, model, {**self.stamp(), **summary})
        write_json(summary, self.output / "pretrain_summary.json", self.stamp())
        logger.info("pretrained base: loss %.4f, held-out ICL accuracy %.3f", losses[-1], icl_accuracy)
        return summary

    def train(
        self,
        kind: Optional[str] = None,
        k: Optional[int] = None,
        seed: Optional[int] = None,
        train_size: Optional[int] = None,
        align_point: Optional[str] = None,
        progress=None,
        model: Optional[TransformerModel] = None,
    ) -> TrainOutcome:
        """Train (or, for activation patches, extract) one variant and checkpoint it."""
        seed = self.seed if seed is None else seed
        tcfg = self.config.train_config()
        vcfg = tcfg.variant if kind is None or kind == tcfg.variant.kind else type(tcfg.variant)(kind=kind)
        tcfg = replace(
            tcfg,
            variant=vcfg,
            seed=seed,
            k_shots=k or tcfg.k_shots,
            align_point=align_point or tcfg.align_point,
        )
        model = model or self.load_base()
        data = self.task_data(seed, train_size)
        variant = build_variant(vcfg, model, substream(seed, "init"))
        rng = substream(seed, "train")
        path = self.variant_path(
            vcfg.kind, tcfg.k_shots, seed, train_size,
            align_point if align_point and align_point != "after_ffn" else None,
        )
        # best-epoch and layer selection score inputs the variant never trains on
        fit, held_out = split_by_input(data.train, tcfg.validation_fraction, substream(seed, "validation"))
        if not vcfg.trainable:
            summary = fit_patch_variant(model, variant, fit, held_out, tcfg, rng)
        else:
            val_set = build_eval_set(held_out, fit, tcfg.k_shots, substream(seed, "eval"))

            def score(v: VariantModel) -> float:
                return accuracy(predict_next(model, val_set.query_tokens(), v.intervention), val_set.answers)

            log_path = self.output / "logs" / f"{path.stem}.jsonl"
            try:
                with TrainingLog(log_path) as log:
                    result = train_loop(model, variant, fit, tcfg, rng, log, score, progress)
            except NonFiniteError as e:
                self.dump_nonfinite(e, variant.parameters(), seed)
                raise
            summary = {
                "kind": vcfg.kind,
                "steps": result.steps,
                "best_epoch": result.best_epoch + 1,
                "epoch_scores": result.epoch_scores,
                "final_total": result.history[-1].total if result.history else None,
            }
        summary.update({
            "k": tcfg.k_shots,
            "train_size": len(data.train),
            "fit_size": len(fit),
            "validation_size": len(held_out),
            "parameters": variant.parameter_count(),
        })
        save_variant(path, variant, {**self.stamp(seed), "train_config": tcfg.to_dict(), "summary": summary})
        return TrainOutcome(variant, path, summary)

    def evaluate(
        self,
        k: Optional[int] = None,
        seed: Optional[int] = None,
        variant_paths: Optional[List[Path]] = None,
        modes=BASE_MODES,
        model: Optional[TransformerModel] = None,
        variants: Optional[List[VariantModel]] = None,
        align_point: Optional[str] = None,
    ) -> List[EvalReport]:
        """Every mode and variant on one shared k-shot evaluation set."""
        seed = self.seed if seed is None else seed
        ecfg = self.config.eval_config()
        k = k or ecfg.k_shots
        model = model or self.load_base()
        data = self.task_data(seed)
        rng = substream(seed, "eval")
        task_cfg = self.config.task_config()
        embeddings = model.embed_tokens(np.arange(model.config.vocab_size)) if task_cfg.icd_strategy == "nearest" else None
        eval_set = build_eval_set(data.evaluation, data.train, k, rng, task_cfg.icd_strategy, embeddings, ecfg.n_eval)
        align_point = align_point or self.config.train_config().align_point
        reports = [
            evaluate_mode(model, eval_set, mode, seed, None, align_point, rng, ecfg.order_permutations)
            for mode in modes
        ]
        loaded = list(variants or []) + [load_variant(p, model) for p in (variant_paths or [])]
        for variant in loaded:
            reports.append(evaluate_mode(model, eval_set, variant.kind, seed, variant, align_point))
        if ecfg.measure_latency:
            timings = {row["mode"]: row["latency_s"] for row in latency_bench(model, eval_set, None, ecfg.latency_repeats)}
            for variant in loaded:
                timings.update({row["mode"]: row["latency_s"] for row in latency_bench(model, eval_set, variant, ecfg.latency_repeats)})
            for report in reports:
                report.latency_s = timings.get(report.mode)
        return reports

    def bench(self, k: Optional[int] = None, n: Optional[int] = None, variant_path: Optional[Path] = None) -> List[Dict]:
        ecfg = self.config.eval_config()
        k = k or ecfg.k_shots
        model = self.load_base()
        data = self.task_data(self.seed)
        eval_set = build_eval_set(data.evaluation, data.train, k, substream(self.seed, "eval"), n=n or ecfg.latency_queries)
        if variant_path is not None:
            variant = load_variant(variant_path, model)
        else:
            variant = build_variant(self.config.variant_config(), model, substream(self.seed, "init"))
        return latency_bench(model, eval_set, variant, ecfg.latency_repeats)

    def run_cell(
        self,
        kind: str,
        k: int,
        seed: int,
        train_size: Optional[int] = None,
        align_point: Optional[str] = None,
        model: Optional[TransformerModel] = None,
    ) -> EvalReport:
        """One ablation grid cell: a base mode is only evaluated, a variant is trained first."""
        model = model or self.load_base()
        if kind in BASE_MODES:
            return self.evaluate(k, seed, modes=(kind,), model=model, align_point=align_point)[0]
        outcome = self.train(kind, k, seed, train_size, align_point, model=model)
        return self.evaluate(k, seed, modes=(), model=model, variants=[outcome.variant], align_point=align_point)[0]
