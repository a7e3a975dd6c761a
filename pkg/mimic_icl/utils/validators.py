"""
Validation utilities for mimic-icl command-line options.
"""

import json
from typing import Any, Dict, Tuple

import click

from ..core.evaluation import BASE_MODES
from ..core.model import ALIGN_POINTS
from ..core.variants import VARIANT_KINDS


def _int_list(text: str) -> Tuple[int, ...]:
    values = []
    for part in text.split(","):
        part = part.strip()
        # "0-4" is a range; a leading "-" is a sign
        head, sep, tail = part[1:].partition("-")
        if sep:
            values.extend(range(int(part[:1] + head), int(tail) + 1))
        elif part:
            values.append(int(part))
    return tuple(values)


def validate_shots(ctx, param, value):
    """Validate a comma-separated list of shot counts, e.g. ``1,4,8``."""
    if value is None:
        return None
    try:
        shots = _int_list(value)
    except ValueError:
        raise click.BadParameter("Shots must be integers, e.g. 1,4,8")
    if not shots or any(k < 1 for k in shots):
        raise click.BadParameter("Shot counts must be at least 1")
    return shots


def validate_seeds(ctx, param, value):
    """Validate seeds given as a list (``0,1,2``) or a range (``0-4``)."""
    if value is None:
        return None
    try:
        seeds = _int_list(value)
    except ValueError:
        raise click.BadParameter("Seeds must be integers, e.g. 0-4 or 0,3,7")
    if not seeds or any(s < 0 for s in seeds):
        raise click.BadParameter("Seeds must be non-negative")
    return seeds


def validate_variants(ctx, param, value):
    """Validate a comma-separated list of variant kinds or base modes, or ``all``."""
    if value is None:
        return None
    if value.strip() == "all":
        return VARIANT_KINDS
    kinds = tuple(v.strip() for v in value.split(",") if v.strip())
    known = BASE_MODES + VARIANT_KINDS
    unknown = [k for k in kinds if k not in known]
    if unknown:
        raise click.BadParameter(f"Unknown variant(s) {', '.join(unknown)}; choose from {', '.join(known)}")
    return kinds


def validate_align_points(ctx, param, value):
    """Validate a comma-separated list of alignment points, e.g. ``after_sa,after_ffn``."""
    if value is None:
        return None
    points = tuple(p.strip() for p in value.split(",") if p.strip())
    unknown = [p for p in points if p not in ALIGN_POINTS]
    if not points or unknown:
        raise click.BadParameter(f"Unknown align point(s) {', '.join(unknown) or value!r}; choose from {', '.join(ALIGN_POINTS)}")
    return points


def parse_value(text: str) -> Any:
    """JSON when it parses (numbers, booleans, null, lists), the raw string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def validate_overrides(ctx, param, value) -> Dict[str, Any]:
    """Turn repeated ``--set section.key=value`` options into a dict."""
    overrides = {}
    for item in value or ():
        if "=" not in item:
            raise click.BadParameter(f"Expected KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = parse_value(raw.strip())
    return overrides
