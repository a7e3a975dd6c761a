#!/usr/bin/env python3
"""
Ablation grid runner for mimic-icl.

Trains and evaluates every (variant, shots, seed, train size, align point)
cell, appending one CSV row per finished cell, with support for resuming an
interrupted grid.
"""

import itertools
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import click

from ..core.config import load_config
from ..core.errors import MimicError
from ..core.pipeline import Experiment
from ..utils.progress import configure_logging
from ..utils.reporting import append_csv
from ..utils.validators import (
    validate_align_points,
    validate_overrides,
    validate_seeds,
    validate_shots,
    validate_variants,
)


class Cell(NamedTuple):
    kind: str
    k: int
    seed: int
    train_size: int
    align_point: str

    @property
    def key(self) -> str:
        return f"{self.kind}|k{self.k}|s{self.seed}|n{self.train_size}|{self.align_point}"


class GridRunner:
    """Run ablation cells for one experiment."""

    def __init__(self, exp: Experiment, resume_file: Optional[Path] = None, csv_path: Optional[Path] = None):
        """Initialize the runner with optional resume capability."""
        self.exp = exp
        self.resume_file = resume_file or exp.output / "ablate_resume.json"
        self.csv_path = csv_path or exp.output / "ablate.csv"
        self.processed = set()
        self.failed: Dict[str, Dict] = {}
        self.load_resume_data()

    def load_resume_data(self):
        """Load resume data from previous runs of the same config."""
        if not self.resume_file.exists():
            return
        try:
            with open(self.resume_file, 'r') as f:
                data = json.load(f)
        except (json.JSONDecodeError, IOError):
            return
        if data.get('config_hash') != self.exp.config_hash:
            click.echo("⚠️  Resume data belongs to a different config; ignoring it")
            return
        self.processed = set(data.get('processed', []))
        self.failed = data.get('failed', {})

    def save_resume_data(self):
        """Save resume data for future runs."""
        try:
            self.resume_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.resume_file, 'w') as f:
                json.dump({
                    'config_hash': self.exp.config_hash,
                    'processed': sorted(self.processed),
                    'failed': self.failed,
                    'last_updated': datetime.now().isoformat()
                }, f, indent=2)
        except IOError:
            pass

    def clear(self):
        if self.resume_file.exists():
            self.resume_file.unlink()
        self.processed.clear()
        self.failed.clear()

    def cells(
        self,
        kinds: Optional[Sequence[str]] = None,
        shots: Optional[Sequence[int]] = None,
        seeds: Optional[Sequence[int]] = None,
        train_sizes: Optional[Sequence[int]] = None,
        align_points: Optional[Sequence[str]] = None,
    ) -> List[Cell]:
        """The grid in run order; unset axes come from the eval config."""
        ecfg = self.exp.config.eval_config()
        axes = (
            seeds or ecfg.seeds,
            shots or ecfg.shots,
            train_sizes or ecfg.train_sizes,
            align_points or ecfg.align_points,
            kinds or ecfg.variants,
        )
        return [Cell(kind, k, seed, n, point) for seed, k, n, point, kind in itertools.product(*axes)]

    def run(self, cells: Iterable[Cell], resume: bool = False) -> Tuple[int, int]:
        """
        Process the cells in order.

        Returns:
            Tuple of (finished_count, failed_count)
        """
        cells = list(cells)
        if not resume and self.csv_path.exists():
            self.csv_path.unlink()
        finished = failed = 0
        model = self.exp.load_base()
        for idx, cell in enumerate(cells, 1):
            if resume and cell.key in self.processed:
                click.echo(f"[{idx}/{len(cells)}] Skipping already finished: {cell.key}")
                finished += 1
                continue

            click.echo(f"\n{'=' * 60}")
            click.echo(f"[{idx}/{len(cells)}] {cell.kind}  k={cell.k}  seed={cell.seed}  n={cell.train_size}  {cell.align_point}")
            try:
                report = self.exp.run_cell(cell.kind, cell.k, cell.seed, cell.train_size, cell.align_point, model=model)
                row = {**report.row(), "train_size": cell.train_size, "align_point": cell.align_point}
                append_csv(row, self.csv_path, self.exp.stamp(cell.seed))
                self.processed.add(cell.key)
                self.failed.pop(cell.key, None)
                finished += 1
                click.echo(f"✅ accuracy {report.accuracy:.3f}  L2 {report.mean_l2:.4f}")
            except KeyboardInterrupt:
                click.echo("\n\n⚠️  Grid interrupted by user")
                self.save_resume_data()
                click.echo(f"💾 Progress saved. Use --resume to continue from cell {idx}")
                break
            except MimicError as e:
                failed += 1
                self.failed[cell.key] = {'error': str(e), 'timestamp': datetime.now().isoformat()}
                click.echo(f"❌ {e}")
            self.save_resume_data()
        return finished, failed


@click.command()
@click.option('-c', '--config', type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help='Experiment config (JSON)')
@click.option('--set', 'overrides', multiple=True, callback=validate_overrides, help='Override a config key (repeatable)')
@click.option('-o', '--output', type=click.Path(file_okay=False, path_type=Path), default=None, help='Output directory')
@click.option('--variants', default=None, callback=validate_variants, help='Variants and base modes (default: eval.variants)')
@click.option('--shots', default=None, callback=validate_shots, help='Shot counts, e.g. 1,4,8 (default: eval.shots)')
@click.option('--seeds', default=None, callback=validate_seeds, help='Seeds, e.g. 0-4 (default: eval.seeds)')
@click.option('--train-sizes', default=None, callback=validate_shots, help='Training set sizes, e.g. 100,200,300')
@click.option('--align-points', default=None, callback=validate_align_points, help='Comma-separated align points: after_sa,after_ffn')
@click.option('--resume', is_flag=True, help='Skip cells finished by a previous run of this config')
@click.option('--clear-resume', is_flag=True, help='Clear resume data and start fresh')
@click.option('--report', type=click.Path(dir_okay=False, path_type=Path), help='Save a plain-text run report to file')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
def main(
    config: Optional[Path],
    overrides: Dict,
    output: Optional[Path],
    variants,
    shots,
    seeds,
    train_sizes,
    align_points,
    resume: bool,
    clear_resume: bool,
    report: Optional[Path],
    verbose: bool,
):
    """
    Run the variant / shots / seeds ablation grid.

    Examples:

        \b
        # Default grid from the eval section of the config
        mimic-icl-ablate

        \b
        # Shot sweep for MimIC and the ICL baseline over five seeds
        mimic-icl-ablate --variants mimic,k_shot_icl --shots 1,4,8 --seeds 0-4

        \b
        # Data-efficiency curve
        mimic-icl-ablate --variants mimic --train-sizes 50,100,200,300

        \b
        # Resume an interrupted grid
        mimic-icl-ablate --resume
    """
    configure_logging(verbose)
    if output is not None:
        overrides = {**overrides, "output_directory": str(output)}
    try:
        exp = Experiment(load_config(config, overrides))
    except MimicError as e:
        click.echo(f"❌ Configuration error: {e}", err=True)
        sys.exit(2)

    click.echo("🧪 mimic-icl ablation grid")
    click.echo("=" * 60)

    runner = GridRunner(exp)
    if clear_resume:
        runner.clear()
        click.echo("🗑️  Cleared resume data")

    try:
        cells = runner.cells(variants, shots, seeds, train_sizes, align_points)
    except MimicError as e:
        click.echo(f"❌ Configuration error: {e}", err=True)
        sys.exit(2)
    click.echo(f"📊 {len(cells)} cells to process")
    if resume and runner.processed:
        skip_count = sum(1 for c in cells if c.key in runner.processed)
        click.echo(f"⏭️  Skipping {skip_count} already finished cells")

    click.echo(f"\n⚙️  Settings:")
    click.echo(f"  Output directory: {exp.output}")
    click.echo(f"  Config hash: {exp.config_hash}")
    click.echo(f"  Resume mode: {'Yes' if resume else 'No'}")

    start_time = datetime.now()
    try:
        finished, failed = runner.run(cells, resume=resume)
    except MimicError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(3)
    duration = datetime.now() - start_time

    click.echo(f"\n{'=' * 60}")
    click.echo("📊 Grid Summary")
    click.echo(f"  Total cells: {len(cells)}")
    click.echo(f"  ✅ Finished: {finished}")
    click.echo(f"  ❌ Failed: {failed}")
    click.echo(f"  ⏱️  Duration: {duration}")
    click.echo(f"  📄 Results: {runner.csv_path}")

    if runner.failed:
        click.echo(f"\n❌ Failed cells:")
        for key, info in runner.failed.items():
            click.echo(f"  {key}")
            click.echo(f"    Error: {info['error']}")

    if report:
        try:
            with open(report, 'w') as f:
                f.write("mimic-icl Ablation Report\n")
                f.write(f"Generated: {datetime.now()}\n")
                f.write(f"{'=' * 60}\n\n")
                f.write(f"Config hash: {exp.config_hash}\n")
                f.write(f"Total cells: {len(cells)}\n")
                f.write(f"Finished: {finished}\n")
                f.write(f"Failed: {failed}\n")
                f.write(f"Duration: {duration}\n\n")
                if runner.failed:
                    f.write("Failed Cells:\n")
                    for key, info in runner.failed.items():
                        f.write(f"\n{key}\n")
                        f.write(f"Error: {info['error']}\n")
                        f.write(f"Time: {info['timestamp']}\n")
            click.echo(f"\n📄 Report saved to: {report}")
        except IOError as e:
            click.echo(f"⚠️  Could not save report: {e}")

    sys.exit(0 if failed == 0 else 3)


if __name__ == '__main__':
    main()
