"""Structured event log: lease events, step timings, retries, cost entries,
stale detections. One canonical JSON record per line when written to disk;
the profiler consumes the in-memory form.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from .clocks import Clock, WallClock
from .store import canonical_json


@dataclass(frozen=True)
class EventRecord:
    seq: int
    t: float
    kind: str
    document_id: Optional[str] = None
    pod: Optional[str] = None
    step: Optional[str] = None
    attempt: Optional[int] = None
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "t": self.t,
            "kind": self.kind,
            "document_id": self.document_id,
            "pod": self.pod,
            "step": self.step,
            "attempt": self.attempt,
            "data": self.data,
        }


class EventLog:
    """Thread-safe append-only event log."""

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self._clock = clock or WallClock()
        self._lock = threading.Lock()
        self._records: list[EventRecord] = []

    def emit(
        self,
        kind: str,
        document_id: Optional[str] = None,
        pod: Optional[str] = None,
        step: Optional[str] = None,
        attempt: Optional[int] = None,
        **data: Any,
    ) -> EventRecord:
        with self._lock:
            record = EventRecord(
                seq=len(self._records),
                t=self._clock.now(),
                kind=kind,
                document_id=document_id,
                pod=pod,
                step=step,
                attempt=attempt,
                data=data,
            )
            self._records.append(record)
            return record

    def records(self) -> list[EventRecord]:
        with self._lock:
            return list(self._records)

    def by_kind(self, kind: str) -> list[EventRecord]:
        return [r for r in self.records() if r.kind == kind]

    def for_document(self, document_id: str) -> list[EventRecord]:
        return [r for r in self.records() if r.document_id == document_id]

    def count(self, kind: str) -> int:
        return len(self.by_kind(kind))

    def write_jsonl(self, path: str | Path) -> None:
        records = self.records()
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(canonical_json(record.to_dict()) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
