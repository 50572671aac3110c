import json
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from .database import Database


@dataclass
class StageRecord:
    job_type: str
    stage: str
    cache_key: str
    outputs: list[str] = field(default_factory=list)
    output_hashes: dict[str, str] = field(default_factory=dict)
    duration: float = 0.0
    id: Optional[int] = None


class StageModel:
    def __init__(self, db: Database):
        self.db = db

    def get(self, job_type: str, stage: str) -> Optional[StageRecord]:
        row = self.db.fetchone(
            "SELECT id, job_type, stage, cache_key, outputs_json, output_hashes_json, duration "
            "FROM stages WHERE job_type = ? AND stage = ?", (job_type, stage))
        if row is None:
            return None
        return StageRecord(
            id=row["id"],
            job_type=row["job_type"],
            stage=row["stage"],
            cache_key=row["cache_key"],
            outputs=json.loads(row["outputs_json"]),
            output_hashes=json.loads(row["output_hashes_json"]),
            duration=float(row["duration"]),
        )

    def save(self, rec: StageRecord) -> None:
        # replace any earlier result for the same stage
        self.db.execute(
            "INSERT INTO stages (job_type, stage, cache_key, outputs_json, output_hashes_json, duration, finished_at) "
            "VALUES (?, ?, ?, ?, ?, ?, ?) "
            "ON CONFLICT(job_type, stage) DO UPDATE SET cache_key = excluded.cache_key, "
            "outputs_json = excluded.outputs_json, output_hashes_json = excluded.output_hashes_json, "
            "duration = excluded.duration, finished_at = excluded.finished_at",
            (rec.job_type, rec.stage, rec.cache_key, json.dumps(rec.outputs),
             json.dumps(rec.output_hashes, sort_keys=True), rec.duration, datetime.now().isoformat()))

    def invalidate(self, job_type: str, stage: str) -> None:
        self.db.execute("DELETE FROM stages WHERE job_type = ? AND stage = ?", (job_type, stage))

    def start_run(self, job_type: str, config_json: str) -> int:
        cur = self.db.execute("INSERT INTO runs (job_type, config_json, started_at) VALUES (?, ?, ?)",
                              (job_type, config_json, datetime.now().isoformat()))
        return cur.lastrowid

    def finish_run(self, run_id: int, status: str) -> None:
        self.db.execute("UPDATE runs SET status = ?, finished_at = ? WHERE id = ?",
                        (status, datetime.now().isoformat(), run_id))
