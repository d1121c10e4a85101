"""
Output Manager - Write run artifacts (CSV tables, network documents,
manifests) atomically into per-command run directories.
"""

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import pandas as pd

SCHEMA_VERSION = 1
CSV_FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"


def sanitize_filename(name: str, max_length: int = 100) -> str:
    """Convert a string to a safe filename."""
    # Remove invalid characters
    safe = re.sub(r'[<>:"/\\|?*]', '', name)
    safe = re.sub(r'\s+', '_', safe)
    safe = re.sub(r'_+', '_', safe)
    safe = safe.strip('_')
    return safe[:max_length] if safe else "untitled"


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write text to a temporary sibling file, then rename it over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    """Write a frame as CSV with 17-significant-digit floats, atomically."""
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, text)


@dataclass
class RunManifest:
    """
    Flat record of one command run.

    Keys mirror the command's flag names, so a manifest can be fed back as
    ``--config`` to replay the run.
    """

    command: str
    parameters: dict[str, Any] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    status: str = "ok"
    error: Optional[str] = None

    def add_output(self, path: Path):
        self.outputs.append(Path(path).name)

    def to_dict(self) -> dict:
        data = {"command": self.command, **self.parameters}
        data["outputs"] = list(self.outputs)
        data["schema_version"] = self.schema_version
        data["status"] = self.status
        if self.error:
            data["error"] = self.error
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = dict(data)
        command = data.pop("command")
        outputs = data.pop("outputs", [])
        schema_version = data.pop("schema_version", SCHEMA_VERSION)
        status = data.pop("status", "ok")
        error = data.pop("error", None)
        return cls(command, data, outputs, schema_version, status, error)


class OutputManager:
    """
    Manage output files for command runs.

    Directory structure:
        {out}/
        ├── manifest.json
        ├── dataset.csv | panel.csv
        ├── model.net
        ├── sensitivities.csv
        └── ...
    """

    def __init__(self, base_dir: str | Path = "runs"):
        self.base_dir = Path(base_dir)

    def get_run_dir(self) -> Path:
        """Get or create the run directory."""
        self.base_dir.mkdir(parents=True, exist_ok=True)
        return self.base_dir

    def path_for(self, filename: str) -> Path:
        return self.get_run_dir() / sanitize_filename(filename)

    def save_frame(self, frame: pd.DataFrame, filename: str, manifest: Optional[RunManifest] = None) -> Path:
        """Save a table as CSV."""
        filepath = write_csv(frame, self.path_for(filename))
        if manifest is not None:
            manifest.add_output(filepath)
        return filepath

    def save_text(self, text: str, filename: str, manifest: Optional[RunManifest] = None) -> Path:
        """Save a text document (e.g. a serialized network)."""
        filepath = atomic_write_text(self.path_for(filename), text)
        if manifest is not None:
            manifest.add_output(filepath)
        return filepath

    def save_manifest(self, manifest: RunManifest) -> Path:
        """Save the run manifest as JSON."""
        text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        return atomic_write_text(self.get_run_dir() / MANIFEST_NAME, text)

    def load_manifest(self) -> Optional[RunManifest]:
        """Load an existing manifest if present."""
        filepath = self.base_dir / MANIFEST_NAME
        if not filepath.exists():
            return None
        try:
            data = json.loads(filepath.read_text(encoding="utf-8"))
            return RunManifest.from_dict(data)
        except (json.JSONDecodeError, KeyError, TypeError):
            return None
