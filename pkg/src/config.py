"""
Run configuration files.

A config file is a flat JSON object whose keys are the command's flag names
(``batch-size`` or ``batch_size``). Its values become parser defaults, so
flags given on the command line win. A run manifest is itself a valid
config file: ``<command> --config <run>/manifest.json`` replays the run.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from errors import ValidationError
from output import RunManifest

logger = logging.getLogger(__name__)

# Manifest bookkeeping that is not a flag.
RESERVED_KEYS = frozenset({"outputs", "schema_version", "status", "error"})


@dataclass
class RunConfig:
    """Resolved parameters of one command run."""

    command: str
    parameters: dict[str, Any] = field(default_factory=dict)

    @property
    def output_dir(self) -> Path:
        return Path(self.parameters.get("out", "runs"))

    @property
    def log_level(self) -> str:
        return str(self.parameters.get("log_level", "INFO"))

    @property
    def seed(self) -> int:
        return int(self.parameters.get("seed", 0))

    def to_manifest(self) -> RunManifest:
        return RunManifest(command=self.command, parameters=dict(self.parameters))


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def load_config_file(path: Union[str, Path]) -> tuple[Optional[str], dict[str, Any]]:
    """
    Read a flat JSON config file.

    Returns:
        (command named in the file or None, parameters keyed by flag dest)

    Raises:
        ValidationError: missing file, invalid JSON or a nested value
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Invalid JSON in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"Config file {path} must hold a JSON object")

    command = data.get("command")
    params = {}
    for key, value in data.items():
        name = normalize_key(key)
        if name in RESERVED_KEYS or name in ("command", "config"):
            continue
        if isinstance(value, (dict, list)):
            raise ValidationError(f"Config key '{key}' in {path} must be a scalar")
        params[name] = value
    logger.debug("Loaded %d parameters from %s", len(params), path)
    return command, params
