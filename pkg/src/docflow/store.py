"""Durable object store for page artifacts plus tracking store for document
records and step checkpoints.

The blob store is the source of truth for page artifacts: a filesystem tree
under ``blobs/`` with a two-level fan-out on the percent-encoded key, payload
and a small metadata sidecar (content length + 64-bit content hash) per blob.

The tracking store is an append-only record log (``tracking/records.log``,
one canonical JSON record per line) plus an in-memory index, compacted on
startup. Writes are serialized per document; reads are concurrent.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import quote

from . import domain
from .clocks import Clock, WallClock
from .domain import DocumentStatus, EventKind, StaleWriter, StatusEvent, StatusKind


class StoreError(Exception):
    pass


class NotFound(StoreError):
    pass


class HashMismatch(StoreError):
    pass


class UnknownStep(StoreError):
    pass


def content_hash(data: bytes) -> str:
    """64-bit content hash (corruption detection, not security)."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Blob:
    key: str
    data: bytes
    length: int
    hash: str


class BlobStore:
    """Filesystem-backed object store. put is idempotent; get verifies hashes."""

    def __init__(self, root: str | Path) -> None:
        self._root = Path(root)
        self._blob_dir = self._root / "blobs"
        self._blob_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _paths(self, key: str) -> tuple[Path, Path]:
        if not key:
            raise StoreError("blob key must be non-empty")
        encoded = quote(key, safe="")
        fan = encoded[:2] if len(encoded) >= 2 else (encoded + "__")[:2]
        directory = self._blob_dir / fan
        return directory / encoded, directory / (encoded + ".meta")

    def put_blob(self, key: str, data: bytes) -> None:
        if not isinstance(data, (bytes, bytearray)):
            raise StoreError("blob payload must be bytes")
        data = bytes(data)
        path, meta_path = self._paths(key)
        digest = content_hash(data)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
            meta_path.write_text(
                canonical_json({"hash": digest, "length": len(data)}), encoding="utf-8"
            )

    def get_blob(self, key: str) -> Blob:
        path, meta_path = self._paths(key)
        try:
            data = path.read_bytes()
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise NotFound(f"blob not found: {key}") from None
        digest = content_hash(data)
        if digest != meta.get("hash") or len(data) != meta.get("length"):
            raise HashMismatch(f"blob corrupted: {key}")
        return Blob(key=key, data=data, length=len(data), hash=digest)

    def exists(self, key: str) -> bool:
        path, _ = self._paths(key)
        return path.exists()


@dataclass
class StepTiming:
    step: str
    attempt: int
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "attempt": self.attempt,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


@dataclass(frozen=True)
class StepCheckpoint:
    document_id: str
    step_name: str
    payload_key: str
    attempt: int
    created_at: float

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "step_name": self.step_name,
            "payload_key": self.payload_key,
            "attempt": self.attempt,
            "created_at": self.created_at,
        }


@dataclass
class TrackingRecord:
    """Durable processing state of one document."""

    document_id: str
    doc_type: str
    steps: tuple[str, ...]
    status: DocumentStatus
    created_at: float
    updated_at: float
    pages: int = 0
    delivery_count: int = 0
    processing_start_time: Optional[float] = None
    step_timings: list[StepTiming] = field(default_factory=list)
    cost_entries: list[dict] = field(default_factory=list)
    checkpoints: dict[str, StepCheckpoint] = field(default_factory=dict)
    applied_events: set[tuple] = field(default_factory=set)

    def timing_for(self, step: str, attempt: int) -> Optional[StepTiming]:
        for t in self.step_timings:
            if t.step == step and t.attempt == attempt:
                return t
        return None

    def total_cost(self) -> float:
        return sum(e["unit_cost"] for e in self.cost_entries)

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "doc_type": self.doc_type,
            "steps": list(self.steps),
            "status": self.status.to_dict(),
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "pages": self.pages,
            "delivery_count": self.delivery_count,
            "processing_start_time": self.processing_start_time,
            "step_timings": [t.to_dict() for t in self.step_timings],
            "cost_entries": list(self.cost_entries),
            "checkpoints": {k: v.to_dict() for k, v in self.checkpoints.items()},
            "applied_events": sorted(list(k) for k in self.applied_events),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrackingRecord":
        return cls(
            document_id=data["document_id"],
            doc_type=data["doc_type"],
            steps=tuple(data["steps"]),
            status=DocumentStatus.from_dict(data["status"]),
            created_at=data["created_at"],
            updated_at=data["updated_at"],
            pages=data.get("pages", 0),
            delivery_count=data.get("delivery_count", 0),
            processing_start_time=data.get("processing_start_time"),
            step_timings=[StepTiming(**t) for t in data.get("step_timings", [])],
            cost_entries=list(data.get("cost_entries", [])),
            checkpoints={
                k: StepCheckpoint(**v) for k, v in data.get("checkpoints", {}).items()
            },
            applied_events={tuple(k) for k in data.get("applied_events", [])},
        )


def checkpoint_blob_key(document_id: str, step: str, attempt: int) -> str:
    return f"checkpoints/{document_id}/{step}/{attempt}"


class TrackingStore:
    """Document records, status transitions, timings, costs and checkpoints.

    Status updates apply :func:`docflow.domain.transition` and persist
    atomically; repeated identical (event, attempt) pairs are no-ops. Events
    from an outdated delivery attempt raise :class:`StaleWriter` so that a
    worker whose lease expired cannot clobber the live owner's record.
    """

    def __init__(
        self,
        root: str | Path,
        blobs: BlobStore,
        clock: Optional[Clock] = None,
    ) -> None:
        self._dir = Path(root) / "tracking"
        self._dir.mkdir(parents=True, exist_ok=True)
        self._log_path = self._dir / "records.log"
        self._blobs = blobs
        self._clock = clock or WallClock()
        self._records: dict[str, TrackingRecord] = {}
        self._index_lock = threading.Lock()
        self._io_lock = threading.Lock()
        self._doc_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._load_and_compact()

    # -- persistence -------------------------------------------------------

    def _load_and_compact(self) -> None:
        if self._log_path.exists():
            with open(self._log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = TrackingRecord.from_dict(json.loads(line))
                    self._records[record.document_id] = record
            tmp = self._log_path.with_suffix(".log.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for record in self._records.values():
                    fh.write(canonical_json(record.to_dict()) + "\n")
            os.replace(tmp, self._log_path)

    def _persist(self, record: TrackingRecord) -> None:
        line = canonical_json(record.to_dict()) + "\n"
        with self._io_lock:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line)

    def _doc_lock(self, document_id: str) -> threading.Lock:
        with self._index_lock:
            return self._doc_locks[document_id]

    def _get_locked(self, document_id: str) -> TrackingRecord:
        record = self._records.get(document_id)
        if record is None:
            raise NotFound(f"no tracking record for {document_id}")
        return record

    # -- API ----------------------------------------------------------------

    @property
    def blobs(self) -> BlobStore:
        return self._blobs

    def create_record(
        self, document_id: str, doc_type: str, steps: Iterable[str], pages: int = 0
    ) -> TrackingRecord:
        now = self._clock.now()
        with self._doc_lock(document_id):
            if document_id in self._records:
                return self._records[document_id]
            record = TrackingRecord(
                document_id=document_id,
                doc_type=doc_type,
                steps=tuple(steps),
                status=domain.SUBMITTED,
                created_at=now,
                updated_at=now,
                pages=pages,
            )
            self._records[document_id] = record
            self._persist(record)
            return record

    def get(self, document_id: str) -> TrackingRecord:
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            return TrackingRecord.from_dict(record.to_dict())

    def exists(self, document_id: str) -> bool:
        return document_id in self._records

    def snapshot(self) -> list[TrackingRecord]:
        with self._index_lock:
            ids = list(self._records)
        return [self.get(i) for i in ids]

    def update_status(self, document_id: str, event: StatusEvent) -> TrackingRecord:
        """Apply a status event; idempotent per (event kind, step, attempt)."""
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            key = event.idempotency_key()
            if key in record.applied_events:
                return TrackingRecord.from_dict(record.to_dict())
            if event.attempt and event.attempt < record.delivery_count:
                raise StaleWriter(
                    f"{document_id}: event attempt {event.attempt} is behind "
                    f"delivery {record.delivery_count}"
                )
            new_status = domain.transition(record.status, event)
            now = self._clock.now()
            record.status = new_status
            record.updated_at = max(now, record.updated_at)
            record.applied_events.add(key)
            if event.kind is EventKind.WORKER_PULLED and event.attempt > record.delivery_count:
                record.delivery_count = event.attempt
            if event.kind is EventKind.STEP_COMPLETED and event.step:
                timing = record.timing_for(event.step, event.attempt)
                if timing is None:
                    timing = StepTiming(step=event.step, attempt=event.attempt, started_at=now)
                    record.step_timings.append(timing)
                timing.finished_at = now
            self._persist(record)
            return TrackingRecord.from_dict(record.to_dict())

    def mark_inference_started(self, document_id: str, at: Optional[float] = None) -> float:
        """Record the first inference call time; first write wins."""
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            if record.processing_start_time is None:
                record.processing_start_time = self._clock.now() if at is None else at
                record.updated_at = max(self._clock.now(), record.updated_at)
                self._persist(record)
            return record.processing_start_time

    def record_step_start(self, document_id: str, step: str, attempt: int) -> None:
        # In-memory only: the started_at rides along with the next persisted
        # update; losing it on a crash is fine because the step re-runs.
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            if record.timing_for(step, attempt) is None:
                record.step_timings.append(
                    StepTiming(step=step, attempt=attempt, started_at=self._clock.now())
                )

    def record_costs(self, document_id: str, entries: list[dict]) -> None:
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            seen = {canonical_json(e) for e in record.cost_entries}
            added = False
            for entry in entries:
                if canonical_json(entry) not in seen:
                    record.cost_entries.append(dict(entry))
                    added = True
            if added:
                record.updated_at = max(self._clock.now(), record.updated_at)
                self._persist(record)

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(
        self, document_id: str, step_name: str, payload: bytes, attempt: int
    ) -> StepCheckpoint:
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            if step_name not in record.steps:
                raise UnknownStep(
                    f"{document_id}: step {step_name!r} is not in pipeline {record.steps}"
                )
            key = checkpoint_blob_key(document_id, step_name, attempt)
            self._blobs.put_blob(key, payload)
            existing = record.checkpoints.get(step_name)
            if existing is not None and existing.attempt >= attempt:
                return existing
            checkpoint = StepCheckpoint(
                document_id=document_id,
                step_name=step_name,
                payload_key=key,
                attempt=attempt,
                created_at=self._clock.now(),
            )
            record.checkpoints[step_name] = checkpoint
            self._persist(record)
            return checkpoint

    def latest_checkpoint(self, document_id: str) -> Optional[tuple[str, bytes]]:
        """Checkpoint of the furthest completed step in pipeline order."""
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            latest: Optional[StepCheckpoint] = None
            for step in record.steps:
                cp = record.checkpoints.get(step)
                if cp is None:
                    break
                latest = cp
            if latest is None:
                return None
            return latest.step_name, self._blobs.get_blob(latest.payload_key).data

    def checkpointed_outputs(self, document_id: str) -> dict[str, bytes]:
        """Payloads of the contiguous prefix of checkpointed steps."""
        with self._doc_lock(document_id):
            record = self._get_locked(document_id)
            outputs: dict[str, bytes] = {}
            for step in record.steps:
                cp = record.checkpoints.get(step)
                if cp is None:
                    break
                outputs[step] = self._blobs.get_blob(cp.payload_key).data
            return outputs

    def compact(self) -> None:
        """Rewrite the record log with one line per document."""
        with self._io_lock:
            tmp = self._log_path.with_suffix(".log.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for record in self._records.values():
                    fh.write(canonical_json(record.to_dict()) + "\n")
            os.replace(tmp, self._log_path)
