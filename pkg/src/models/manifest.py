from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"


def sha256_path(path: str | Path) -> str:
    """Content hash of a file, or of every file under a directory (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode())
            h.update(b"\0")
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Append-only record of one training run, mirrored to manifest.json and metrics.jsonl."""

    output_dir: Path
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    datasets: dict[str, str] = field(default_factory=dict)
    steps: list[dict[str, Any]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)

    def add_dataset(self, path: Optional[str | Path]) -> None:
        if path is not None and Path(path).exists():
            self.datasets[str(path)] = sha256_path(path)

    def reset_metrics(self) -> None:
        (self.output_dir / METRICS_FILE).unlink(missing_ok=True)

    def log_step(self, entry: dict[str, Any]) -> None:
        self.steps.append(dict(entry))
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with (self.output_dir / METRICS_FILE).open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def add_checkpoint(self, path: str | Path) -> None:
        self.checkpoints.append(str(path))
        self.save()

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed, "datasets": self.datasets,
                "steps": self.steps, "checkpoints": self.checkpoints, "summary": self.summary}

    def save(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path
