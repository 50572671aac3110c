from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Type, TypeVar

import numpy as np

from errors import RecordError

R = TypeVar("R")


@dataclass
class InstructionRecord:
    instruction: str
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise RecordError("instruction must be a non-empty string")

    def to_dict(self) -> dict:
        out = {"instruction": self.instruction}
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, row: dict) -> "InstructionRecord":
        return cls(row.get("instruction", ""), dict(row.get("provenance") or {}))


@dataclass
class LabeledRecord:
    """A teacher-labeled pair.  `error` marks a row the teacher failed to label."""

    instruction: str
    output: str
    error: Optional[str] = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise RecordError("instruction must be a non-empty string")
        if self.error is None and (not isinstance(self.output, str) or not self.output):
            raise RecordError(f"output must be non-empty for instruction {self.instruction[:40]!r}")

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        out = {"instruction": self.instruction, "output": self.output}
        if self.error is not None:
            out["error"] = self.error
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, row: dict) -> "LabeledRecord":
        return cls(row.get("instruction", ""), row.get("output", "") or "", row.get("error"),
                   dict(row.get("provenance") or {}))


@dataclass
class PreferenceRecord:
    instruction: str
    chosen: str
    rejected: str
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.instruction or not self.chosen or not self.rejected:
            raise RecordError("preference rows need instruction, chosen and rejected")

    @property
    def degenerate(self) -> bool:
        return self.chosen == self.rejected

    def to_dict(self) -> dict:
        out = {"instruction": self.instruction, "chosen": self.chosen, "rejected": self.rejected}
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, row: dict) -> "PreferenceRecord":
        return cls(row.get("instruction", ""), row.get("chosen", ""), row.get("rejected", ""),
                   dict(row.get("provenance") or {}))


@dataclass
class CoTRecord:
    instruction: str
    reasoning: str
    answer: str
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.instruction:
            raise RecordError("instruction must be non-empty")
        if not self.reasoning:
            raise RecordError(f"reasoning must be non-empty for instruction {self.instruction[:40]!r}")

    def to_dict(self) -> dict:
        out = {"instruction": self.instruction, "reasoning": self.reasoning, "answer": self.answer}
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, row: dict) -> "CoTRecord":
        return cls(row.get("instruction", ""), row.get("reasoning", ""), row.get("answer", ""),
                   dict(row.get("provenance") or {}))


@dataclass
class TopKPosition:
    target_token: int
    topk: list[tuple[int, float]]


@dataclass
class TopKLogitsRecord:
    sample_index: int
    positions: list[TopKPosition]

    def validate(self, tol: float = 1e-6) -> "TopKLogitsRecord":
        for pos in self.positions:
            ids = [t for t, _ in pos.topk]
            lps = [lp for _, lp in pos.topk]
            if len(set(ids)) != len(ids):
                raise RecordError(f"sample {self.sample_index}: duplicate token ids in a top-k entry")
            if any(b > a for a, b in zip(lps, lps[1:])):
                raise RecordError(f"sample {self.sample_index}: top-k logprobs are not non-increasing")
            if float(np.exp(lps).sum()) > 1.0 + tol:
                raise RecordError(f"sample {self.sample_index}: top-k probability mass exceeds 1")
        return self

    def to_dict(self) -> dict:
        return {"sample_index": self.sample_index,
                "positions": [{"target_token": p.target_token, "topk": [[t, lp] for t, lp in p.topk]}
                              for p in self.positions]}

    @classmethod
    def from_dict(cls, row: dict) -> "TopKLogitsRecord":
        positions = [TopKPosition(int(p["target_token"]), [(int(t), float(lp)) for t, lp in p["topk"]])
                     for p in row.get("positions", [])]
        return cls(int(row["sample_index"]), positions)


@dataclass
class GroupRollout:
    """G sampled completions for one prompt, padded to a common length."""

    prompt: list[int]
    completions: list[list[int]]
    rewards: np.ndarray
    old_logprobs: Optional[np.ndarray] = None
    completion_mask: Optional[np.ndarray] = None

    @property
    def group_size(self) -> int:
        return len(self.completions)


# --- file helpers ---

def load_records(path: str | Path, cls: Type[R]) -> list[R]:
    """Read a JSON array of rows into record objects."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise RecordError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(rows, list):
        raise RecordError(f"{path}: expected a JSON array of records")
    out = []
    for i, row in enumerate(rows):
        if isinstance(row, str) and cls is InstructionRecord:
            row = {"instruction": row}
        if not isinstance(row, dict):
            raise RecordError(f"{path}: row {i} is not an object")
        try:
            out.append(cls.from_dict(row))
        except RecordError as e:
            raise RecordError(f"{path}: row {i}: {e}") from e
    return out


def save_records(path: str | Path, records: Sequence[Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.to_dict() if hasattr(r, "to_dict") else r for r in records]
    path.write_text(json.dumps(rows, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


class TopKLogitsWriter:
    """Streams TopKLogitsRecord rows to a JSON Lines file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = None
        self.count = 0

    def __enter__(self) -> "TopKLogitsWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")
        return self

    def write(self, record: TopKLogitsRecord) -> None:
        self._fh.write(json.dumps(record.to_dict(), separators=(",", ":")) + "\n")
        self.count += 1

    def __exit__(self, exc_type, exc, tb) -> None:
        self._fh.close()
        self._fh = None


def iter_topk_records(path: str | Path) -> Iterator[TopKLogitsRecord]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TopKLogitsRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise RecordError(f"{path}: bad logits line {lineno}: {e}") from e
