"""Task lifecycle events, appended as JSONL one object per line."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..clock import now_ns

# per-task lifecycle, in the order timestamps must follow
STAGES = (
    "created",
    "serialized",
    "sent_to_server",
    "sent_to_relay",
    "fetched_by_endpoint",
    "started_on_worker",
    "inputs_resolved",
    "finished_on_worker",
    "result_serialized",
    "result_posted",
    "result_received",
    "data_resolved",
    "decision_made",
    "next_submitted",
)
STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}

# run-level markers, keyed by a round id instead of a task id
RUN_STAGES = ("retrain_requested", "queue_reprioritized")


@dataclass(frozen=True)
class EventRecord:
    task_id: str
    topic: str
    stage: str
    t_ns: int
    worker_id: str | None = None
    detail: str | None = None

    def __post_init__(self):
        if self.stage not in STAGE_INDEX and self.stage not in RUN_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_json(self) -> str:
        d = {"task_id": self.task_id, "topic": self.topic, "stage": self.stage, "t_ns": self.t_ns}
        if self.worker_id is not None:
            d["worker_id"] = self.worker_id
        if self.detail is not None:
            d["detail"] = self.detail
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "EventRecord":
        return cls(d["task_id"], d["topic"], d["stage"], int(d["t_ns"]), d.get("worker_id"), d.get("detail"))


class EventLog:
    """Append-only, flush-per-line event sink shared by all threads of a process."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, record: EventRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            self._f.write(line)
            self._f.flush()

    def record(self, task_id: str, topic: str, stage: str, t_ns: int | None = None, **extra) -> EventRecord:
        rec = EventRecord(task_id, topic, stage, now_ns() if t_ns is None else t_ns, **extra)
        self.append(rec)
        return rec

    def close(self) -> None:
        with self._lock:
            self._f.close()


class NullLog:
    """Discards events; used when a component runs without telemetry."""

    path = None

    def append(self, record: EventRecord) -> None:
        pass

    def record(self, task_id, topic, stage, t_ns=None, **extra):
        return None

    def close(self) -> None:
        pass


def record_event(log: EventLog, record: EventRecord) -> None:
    log.append(record)


def read_events(paths: Iterable[str | os.PathLike]) -> list[EventRecord]:
    out = []
    for p in paths:
        with open(p, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    out.append(EventRecord.from_dict(json.loads(line)))
    return out
