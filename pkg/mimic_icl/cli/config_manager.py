#!/usr/bin/env python3
"""
Configuration manager CLI for mimic-icl.

This script allows users to view and modify the experiment configuration
stored in ~/.mimic-icl/config.json (or the file given with --config).
"""

import sys
from pathlib import Path
from typing import Optional

import click

from ..core.config import SECTIONS, Config
from ..core.errors import ConfigError
from ..core.variants import VARIANT_KINDS, VariantConfig
from ..utils.validators import parse_value


@click.group()
@click.option('-c', '--config', 'config_path', type=click.Path(dir_okay=False, path_type=Path), default=None, help='Config file to manage')
@click.pass_context
def cli(ctx, config_path: Optional[Path]):
    """Manage mimic-icl configuration."""
    ctx.obj = {"path": config_path}


def _load(ctx) -> Config:
    path = ctx.obj["path"]
    try:
        if path is not None and not path.exists():
            # a new file starts from the defaults
            return _fresh(path)
        return Config(path)
    except ConfigError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(2)


def _fresh(path: Path) -> Config:
    cfg = Config(use_user_file=False)
    cfg.config_path = path
    return cfg


@cli.command()
@click.argument('section', required=False, type=click.Choice(SECTIONS))
@click.pass_context
def show(ctx, section: Optional[str]):
    """Show current configuration (optionally one section)."""
    cfg = _load(ctx)
    click.echo("🔧 Current Configuration")
    click.echo("=" * 50)

    data = cfg.to_dict()
    if section is None:
        for key in ("output_directory", "seed", "schema_version"):
            click.echo(f"{key:.<32} {data[key]}")
    for name in (section,) if section else SECTIONS:
        click.echo(f"\n[{name}]")
        for key, value in data[name].items():
            click.echo(f"{name + '.' + key:.<32} {value}")
    click.echo(f"\n{'Config File':.<32} {cfg.config_path}")
    click.echo(f"{'Config Hash':.<32} {cfg.config_hash()}")


@cli.command()
@click.argument('key')
@click.argument('value')
@click.pass_context
def set(ctx, key: str, value: str):
    """Set a configuration value, e.g. ``train.lr 0.01``."""
    cfg = _load(ctx)
    parsed = parse_value(value)
    try:
        cfg.set(key, parsed)
        cfg.validate()
        cfg.save()
        click.echo(f"✅ Set {key} = {parsed}")
    except ConfigError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(2)


@cli.command()
@click.option('--key', help='Reset specific key or section only')
@click.pass_context
def reset(ctx, key: Optional[str]):
    """Reset configuration to defaults."""
    cfg = _load(ctx)
    if key:
        try:
            cfg.reset(key)
            cfg.save()
            click.echo(f"✅ Reset {key} to default value")
        except ConfigError as e:
            click.echo(f"❌ {e}", err=True)
            sys.exit(2)
    else:
        if click.confirm("Reset all settings to defaults?"):
            cfg.reset()
            cfg.save()
            click.echo("✅ All settings reset to defaults")


@cli.command()
def variants():
    """Show available variants and their defaults."""
    click.echo("🧩 Available Variants")
    click.echo("=" * 50)

    for kind in VARIANT_KINDS:
        vcfg = VariantConfig(kind=kind)
        params = {k: v for k, v in vcfg.to_dict().items() if k != "kind"}
        extras = ", ".join(f"{k}={v}" for k, v in params.items()) or "-"
        trainable = "trainable" if vcfg.trainable else "extracted"
        click.echo(f"{kind:.<20} {trainable:<10} {extras}")

    click.echo("\nBase modes (evaluation only):")
    click.echo("zero_shot       - query alone, no demonstrations")
    click.echo("k_shot_icl      - k demonstrations in the prompt")


if __name__ == '__main__':
    cli()
