"""
Run manifest written before any computation. A run directory that holds a
manifest but no summary belongs to a run that did not finish.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from src.core.exceptions import StorageError

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    resolved_config: Dict[str, Dict[str, Any]]
    seed: int
    output_dir: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    arguments: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())


def write_manifest(manifest: RunManifest) -> Path:
    path = Path(manifest.output_dir) / MANIFEST_FILE
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(manifest), f, indent=2, sort_keys=True, default=str)
            f.write('\n')
    except OSError as e:
        raise StorageError(f"cannot write manifest {path}: {e}")

    logger.debug(f"Manifest written to {path}", extra={'extra_data': {'command': manifest.command}})
    return path


def read_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return RunManifest(**json.load(f))
    except (OSError, ValueError, TypeError) as e:
        raise StorageError(f"cannot read manifest {path}: {e}")
