"""Single-file JSON checkpoints (``format_version: 1``)."""

from __future__ import annotations

import json
from pathlib import Path

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": FORMAT_VERSION, **payload}
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    return doc
