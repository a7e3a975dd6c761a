"""
Result files: CSV tables stamped with config hash, seed and version.
"""

import json
import subprocess
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd

from .. import __version__

REPORT_COLUMNS = ("mode", "k", "seed", "accuracy", "mean_l2", "mean_cosine", "latency_s", "tokens")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = out.stdout.strip()
    return described if out.returncode == 0 and described else __version__


def stamp(config_hash: str, seed: int) -> Dict[str, object]:
    return {"config_hash": config_hash, "seed": seed, "version": version_string()}


def write_csv(rows: Sequence[Dict], path: Path, stamp_fields: Dict[str, object], columns: Optional[Iterable[str]] = None) -> Path:
    """Write rows as CSV; stamp fields fill columns the rows do not already carry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(rows))
    for key, value in stamp_fields.items():
        if key not in df.columns:
            df[key] = value
    if columns is not None:
        ordered = [c for c in columns if c in df.columns]
        df = df[ordered + [c for c in df.columns if c not in ordered]]
    df.to_csv(path, index=False)
    return path


def append_csv(row: Dict, path: Path, stamp_fields: Dict[str, object]) -> Path:
    """Append one row, writing the header only for a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([{**stamp_fields, **row}])
    df.to_csv(path, mode="a", header=not path.exists(), index=False)
    return path


def write_json(payload: Dict, path: Path, stamp_fields: Dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({**stamp_fields, **payload}, f, indent=2, default=str)
    return path


def aggregate_reports(paths: Sequence[Path]) -> pd.DataFrame:
    """Mean and standard deviation over seeds per (mode, k) across result CSVs."""
    frames: List[pd.DataFrame] = [pd.read_csv(p) for p in paths]
    if not frames:
        raise ValueError("no report files given")
    df = pd.concat(frames, ignore_index=True)
    missing = {"mode", "k", "accuracy"} - set(df.columns)
    if missing:
        raise ValueError(f"report files lack columns: {sorted(missing)}")
    metrics = [c for c in ("accuracy", "mean_l2", "mean_cosine", "latency_s") if c in df.columns]
    summary = df.groupby(["mode", "k"])[metrics].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary["runs"] = df.groupby(["mode", "k"]).size()
    return summary.reset_index()
