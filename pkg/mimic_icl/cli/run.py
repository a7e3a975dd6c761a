#!/usr/bin/env python3
"""
Main CLI for mimic-icl experiments.
"""

import functools
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click

from ..core.config import load_config
from ..core.evaluation import BASE_MODES
from ..core.errors import CheckpointError, ConfigError, MimicError, NonFiniteError, VerificationError
from ..core.model import ALIGN_POINTS
from ..core.pipeline import Experiment
from ..core.variants import VARIANT_KINDS
from ..core.verification import run_verification
from ..utils.progress import configure_logging, create_progress_hook
from ..utils.reporting import REPORT_COLUMNS, aggregate_reports, write_csv, write_json
from ..utils.seeding import substream_seed
from ..utils.validators import (
    validate_align_points,
    validate_overrides,
    validate_seeds,
    validate_shots,
    validate_variants,
)

EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def handle_errors(func):
    """Map errors onto the exit codes: 1 verification, 2 config, 3 any other runtime abort."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except VerificationError as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(EXIT_VERIFICATION)
        except ConfigError as e:
            click.echo(f"❌ Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except NonFiniteError as e:
            click.echo(f"❌ {e}", err=True)
            click.echo("💾 Diagnostics written to the debug/ folder; existing checkpoints were kept", err=True)
            sys.exit(EXIT_RUNTIME)
        except MimicError as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        except (click.ClickException, click.Abort):
            raise
        except Exception as e:
            click.echo(f"❌ Unexpected {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def experiment(ctx: click.Context) -> Experiment:
    """Build the experiment lazily so ``report`` works without a config."""
    obj = ctx.obj
    if "experiment" not in obj:
        overrides: Dict = dict(obj["overrides"])
        if obj["seed"] is not None:
            overrides["seed"] = obj["seed"]
        if obj["output"] is not None:
            overrides["output_directory"] = str(obj["output"])
        obj["experiment"] = Experiment(load_config(obj["config"], overrides))
    return obj["experiment"]


@click.group()
@click.option(
    '-c', '--config',
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help='Experiment config (JSON); defaults to ~/.mimic-icl/config.json when present'
)
@click.option(
    '--set', 'overrides',
    multiple=True,
    callback=validate_overrides,
    help='Override a config key, e.g. --set train.lr=0.01 (repeatable)'
)
@click.option(
    '-o', '--output',
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help='Output directory (default: config output_directory or $MIMIC_ICL_OUTPUT)'
)
@click.option('--seed', type=int, default=None, help='Root seed for every random stream')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
@click.pass_context
def cli(ctx, config: Optional[Path], overrides: Dict, output: Optional[Path], seed: Optional[int], verbose: bool):
    """
    Train and evaluate learned attention shifts that replace in-context demonstrations.

    Examples:

        \b
        # Check the math before anything else
        mimic-icl verify

        \b
        # Pretrain the base model, then train and evaluate MimIC
        mimic-icl pretrain
        mimic-icl train --variant mimic --shots 8
        mimic-icl eval --variants mimic --shots 8

        \b
        # Shot sweep over three seeds
        mimic-icl ablate --variants mimic,lora --shots 1,4,8 --seeds 0-2
    """
    configure_logging(verbose)
    ctx.obj = {"config": config, "overrides": overrides, "output": output, "seed": seed, "verbose": verbose}


@cli.command()
@click.option('--instances', type=int, default=100, help='Random instances for the decomposition identity')
@click.option('--skip-variants', is_flag=True, help='Skip the per-variant gradient checks')
@click.pass_context
@handle_errors
def verify(ctx, instances: int, skip_variants: bool):
    """Run the identity, bounds, zero-shift and gradient suites."""
    exp = experiment(ctx)
    click.echo("🔍 Running verification suites")
    report = run_verification(substream_seed(exp.seed, "verify"), instances, include_variants=not skip_variants)
    for suite in report.suites:
        mark = "✅" if suite.passed else "❌"
        click.echo(f"{mark} {suite.name:.<28} max error {suite.max_error:.3e} (tol {suite.tolerance:.0e}, {suite.cases} cases)")
        for failure in suite.failures:
            click.echo(f"     - {failure}")
    path = write_json(report.to_dict(), exp.output / "verify.json", exp.stamp())
    click.echo(f"📄 Report saved to: {path}")
    report.raise_for_failures()


@cli.command()
@click.pass_context
@handle_errors
def pretrain(ctx):
    """Pretrain the base model on the mapping episode stream."""
    exp = experiment(ctx)
    click.echo(f"🧠 Pretraining base model ({exp.config.pretrain_config().steps} steps)")
    summary = exp.pretrain(progress=create_progress_hook("pretraining"))
    click.echo(f"📉 Final loss: {summary['final_loss']:.4f}")
    click.echo(f"🎯 Held-out k-shot ICL accuracy: {summary['held_out_icl_accuracy']:.3f}")
    click.echo(f"💾 Base checkpoint: {exp.base_path}")


@cli.command()
@click.option('--variant', type=click.Choice(VARIANT_KINDS), default=None, help='Variant to train (default: config variant.kind)')
@click.option('-k', '--shots', type=int, default=None, help='Demonstrations in each teacher prompt')
@click.option('--train-size', type=int, default=None, help='Number of training samples')
@click.option('--align-point', type=click.Choice(ALIGN_POINTS), default=None, help='Hidden state to align')
@click.pass_context
@handle_errors
def train(ctx, variant: Optional[str], shots: Optional[int], train_size: Optional[int], align_point: Optional[str]):
    """Train one variant against the frozen base model."""
    exp = experiment(ctx)
    kind = variant or exp.config.variant_config().kind
    click.echo(f"🏋️  Training {kind}")
    outcome = exp.train(kind, shots, None, train_size, align_point, progress=create_progress_hook(f"training {kind}"))
    summary = outcome.summary
    click.echo(f"  Parameters: {summary['parameters']}")
    if "best_epoch" in summary:
        click.echo(f"  Best epoch: {summary['best_epoch']} (validation accuracy {max(summary['epoch_scores']):.3f})")
    if "layer" in summary:
        click.echo(f"  Patch layer: {summary['layer']} (validation accuracy {summary['validation_accuracy']:.3f})")
    click.echo(f"💾 Variant checkpoint: {outcome.checkpoint}")


def _variant_paths(exp: Experiment, kinds: Tuple[str, ...], k: int, checkpoints: Tuple[Path, ...]) -> List[Path]:
    paths = list(checkpoints)
    for kind in kinds or ():
        if kind in BASE_MODES:
            continue
        path = exp.variant_path(kind, k, exp.seed)
        if not path.exists():
            raise CheckpointError(f"no {kind} checkpoint for k={k}, seed={exp.seed} at {path}; run `mimic-icl train --variant {kind} --shots {k}` first")
        paths.append(path)
    return paths


@cli.command(name="eval")
@click.option('-k', '--shots', type=int, default=None, help='Demonstrations for the k-shot ICL reference')
@click.option('--variants', default=None, callback=validate_variants, help='Trained variants to include, e.g. mimic,lora')
@click.option(
    '--checkpoint', 'checkpoints',
    multiple=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help='Explicit variant checkpoint (repeatable)'
)
@click.option('--latency', is_flag=True, help='Also time each mode')
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False, path_type=Path), default=None, help='Output CSV path')
@click.pass_context
@handle_errors
def evaluate(ctx, shots: Optional[int], variants, checkpoints, latency: bool, csv_path: Optional[Path]):
    """Evaluate zero-shot, k-shot ICL and trained variants on one shared set."""
    exp = experiment(ctx)
    if latency:
        exp.config.set("eval.measure_latency", True)
    k = shots or exp.config.eval_config().k_shots
    reports = exp.evaluate(k, variant_paths=_variant_paths(exp, variants, k, checkpoints))
    click.echo(f"📊 Evaluation at k={k}, seed={exp.seed}")
    for r in reports:
        click.echo(f"  {r.mode:.<22} accuracy {r.accuracy:.3f}  L2 {r.mean_l2:.4f}  cos {r.mean_cosine:.4f}  tokens {r.tokens}")
    path = write_csv([r.row() for r in reports], csv_path or exp.output / f"eval-k{k}-s{exp.seed}.csv", exp.stamp(), REPORT_COLUMNS)
    click.echo(f"📄 Results saved to: {path}")


@cli.command()
@click.option('--variants', default=None, callback=validate_variants, help='Variants for the grid (default: eval.variants)')
@click.option('--shots', default=None, callback=validate_shots, help='Shot counts, e.g. 1,4,8')
@click.option('--seeds', default=None, callback=validate_seeds, help='Seeds, e.g. 0-4')
@click.option('--train-sizes', default=None, callback=validate_shots, help='Training set sizes, e.g. 100,200,300')
@click.option('--align-points', default=None, callback=validate_align_points, help='Comma-separated align points: after_sa,after_ffn')
@click.option('--resume', is_flag=True, help='Skip cells finished by a previous run')
@click.pass_context
@handle_errors
def ablate(ctx, variants, shots, seeds, train_sizes, align_points, resume: bool):
    """Variant x shots x seeds (x train sizes x align points) grid; one CSV row per cell."""
    from .ablate import GridRunner

    exp = experiment(ctx)
    runner = GridRunner(exp)
    cells = runner.cells(variants, shots, seeds, train_sizes, align_points)
    done, failed = runner.run(cells, resume=resume)
    click.echo(f"📊 {done} cells finished, {failed} failed; results in {runner.csv_path}")
    if failed:
        sys.exit(EXIT_RUNTIME)


@cli.command()
@click.option('-k', '--shots', type=int, default=None, help='Demonstrations for the ICL prompt')
@click.option('-n', '--queries', type=int, default=None, help='Queries per timed batch')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help='Variant checkpoint to time')
@click.pass_context
@handle_errors
def bench(ctx, shots: Optional[int], queries: Optional[int], checkpoint: Optional[Path]):
    """Time k-shot ICL against zero-shot and a variant."""
    exp = experiment(ctx)
    rows = exp.bench(shots, queries, checkpoint)
    click.echo("⏱️  Latency per query")
    for row in rows:
        click.echo(f"  {row['mode']:.<22} {row['latency_s'] * 1e3:.3f} ms  {row['tokens']} tokens  x{row['speedup']:.2f}")
    path = write_csv(rows, exp.output / f"bench-k{rows[0]['k']}-s{exp.seed}.csv", exp.stamp())
    click.echo(f"📄 Results saved to: {path}")


@cli.command()
@click.argument('files', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), default=None, help='Write the summary as CSV')
@handle_errors
def report(files: Tuple[Path, ...], out: Optional[Path]):
    """Mean and standard deviation over seeds per (mode, k)."""
    try:
        summary = aggregate_reports(files)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    click.echo(summary.to_string(index=False))
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out, index=False)
        click.echo(f"\n📄 Summary saved to: {out}")


if __name__ == '__main__':
    cli()
