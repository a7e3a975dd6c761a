"""
Progress tracking utilities for training runs.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import click
from tqdm import tqdm


class ProgressHandler(logging.Handler):
    """Logging handler that prints through tqdm so bars are not torn apart."""

    def __init__(self, verbose: bool = False):
        super().__init__(logging.DEBUG if verbose else logging.INFO)
        self.verbose = verbose

    def emit(self, record: logging.LogRecord) -> None:
        msg = record.getMessage()
        if record.levelno >= logging.ERROR:
            tqdm.write(f"❌ Error: {msg}", file=click.get_text_stream("stderr"))
        elif record.levelno >= logging.WARNING:
            tqdm.write(f"⚠️  Warning: {msg}")
        elif record.levelno >= logging.INFO:
            if self.verbose:
                tqdm.write(f"   {msg}")
        else:
            tqdm.write(f"DEBUG: {msg}")


def configure_logging(verbose: bool = False) -> None:
    root = logging.getLogger("mimic_icl")
    for handler in list(root.handlers):
        if isinstance(handler, ProgressHandler):
            root.removeHandler(handler)
    root.addHandler(ProgressHandler(verbose))
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


class TrainingLog:
    """JSON-lines log, one record per optimizer step."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict] = []
        self._file = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "w")

    def write(self, record: Dict) -> None:
        self.records.append(record)
        if self._file is not None:
            self._file.write(json.dumps(record) + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create_progress_hook(desc: str = "training", disable: bool = False):
    """Create a progress hook for step tracking.

    The hook takes the dicts the training loops emit:
    ``{"status": "step", "step", "total", "loss", "lr"}`` and a final
    ``{"status": "finished"}``.
    """
    state = {"bar": None}

    def hook(d):
        bar = state["bar"]
        if d["status"] == "step":
            if bar is None:
                bar = state["bar"] = tqdm(total=d.get("total"), desc=desc, disable=disable, leave=False)
            bar.n = d["step"]
            postfix = {}
            if "loss" in d:
                postfix["loss"] = f"{d['loss']:.4f}"
            if "lr" in d:
                postfix["lr"] = f"{d['lr']:.2e}"
            bar.set_postfix(postfix, refresh=False)
            bar.refresh()
        elif d["status"] == "finished" and bar is not None:
            bar.close()
            state["bar"] = None
            if not disable:
                click.echo(f"✅ {desc} complete ({d.get('step', 0)} steps)")

    return hook
