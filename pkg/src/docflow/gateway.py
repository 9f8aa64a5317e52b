"""Ingestion and status service.

The gateway accepts submissions (synchronously, or via the ingestion queue),
persists page blobs and tracking records, and enqueues work references for
the workers. All page blobs are durable *before* the worker-queue enqueue, so
a worker never observes a queued id whose blobs are missing. It performs no
inference or extraction of any kind.

Status reads merge the tracking store with a cache fed by the status queue;
the queue is the authoritative freshness signal, the store the fallback
after a restart.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import domain
from .clocks import Clock, WallClock
from .config import PipelineConfig
from .events import EventLog
from .mqueue import MessageQueue
from .store import TrackingStore

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class ValidationError(GatewayError):
    pass


class StorageError(GatewayError):
    pass


class GatewayClosed(GatewayError):
    pass


class SimulatedIngestCrash(Exception):
    """Raised by ingest fault hooks to model the gateway dying mid-submit."""


@dataclass
class Submission:
    """One inbound document: ordered page payloads plus metadata."""

    pages: Sequence[bytes]
    doc_type: Optional[str] = None
    document_id: Optional[str] = None
    idempotency_key: Optional[str] = None
    source: str = "api"
    page_sizes_mib: Optional[Sequence[float]] = None  # declared sizes, metadata only


@dataclass(frozen=True)
class ArrivalPattern:
    """Submission timing model: steady rate or scanner-style bursts."""

    mode: str  # "steady" | "bursty"
    rate_docs_per_s: float = 1.0
    batch_size: int = 50
    batch_interval_s: float = 60.0
    # Scanner model defaults: 150 pages/min feeding 8-page documents.
    scanner_pages_per_minute: float = 150.0

    @staticmethod
    def steady(rate_docs_per_s: float) -> "ArrivalPattern":
        if rate_docs_per_s <= 0:
            raise ValueError("rate must be > 0")
        return ArrivalPattern(mode="steady", rate_docs_per_s=rate_docs_per_s)

    @staticmethod
    def bursty(batch_size: int, batch_interval_s: float) -> "ArrivalPattern":
        if batch_size < 1 or batch_interval_s <= 0:
            raise ValueError("invalid burst parameters")
        return ArrivalPattern(
            mode="bursty", batch_size=batch_size, batch_interval_s=batch_interval_s
        )


@dataclass
class IngestFaults:
    """Fault injection points for chaos tests.

    ``storage_fault`` makes a page write fail cleanly (the gateway reports a
    StorageError and marks the document failed); ``crash_point`` aborts the
    submission abruptly at a named point ("after_record", "after_page_<i>",
    "before_enqueue") as if the gateway process died.
    """

    storage_fault_page: Optional[int] = None
    crash_point: Optional[str] = None
    fired: list[str] = field(default_factory=list)

    def maybe_crash(self, point: str) -> None:
        if self.crash_point == point:
            self.fired.append(point)
            raise SimulatedIngestCrash(point)


class GatewayService:
    def __init__(
        self,
        tracking: TrackingStore,
        worker_queue: MessageQueue,
        status_queue: MessageQueue,
        ingestion_queue: MessageQueue,
        config: PipelineConfig,
        event_log: EventLog,
        clock: Optional[Clock] = None,
        time_scale: Optional[float] = None,
        faults: Optional[IngestFaults] = None,
    ) -> None:
        self._tracking = tracking
        self._worker_queue = worker_queue
        self._status_queue = status_queue
        self._ingestion_queue = ingestion_queue
        self._config = config
        self._events = event_log
        self._clock = clock or WallClock()
        self._time_scale = time_scale if time_scale is not None else config.time_scale
        self._faults = faults
        self._lock = threading.Lock()
        self._closed = False
        self._ids = itertools.count()
        self._idempotency: dict[str, str] = {}
        self._status_cache: dict[str, str] = {}
        self._pending: dict[str, Submission] = {}
        self._consumers: list[threading.Thread] = []
        self._stop = threading.Event()

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        """Start the status-queue and ingestion-queue consumers."""
        self._stop.clear()
        for name, target in (
            ("status-consumer", self._consume_status),
            ("ingest-consumer", self._consume_ingestion),
        ):
            thread = threading.Thread(target=target, name=f"gateway-{name}", daemon=True)
            self._consumers.append(thread)
            thread.start()

    def stop(self) -> None:
        """Stop accepting submissions; in-flight worker processing continues."""
        with self._lock:
            self._closed = True
        self._stop.set()
        for thread in self._consumers:
            thread.join(timeout=5.0)
        self._consumers = []

    @property
    def closed(self) -> bool:
        with self._lock:
            return self._closed

    # -- submission ------------------------------------------------------------

    def _validate(self, submission: Submission) -> str:
        if not submission.pages:
            raise ValidationError("submission has no pages")
        if any(not p for p in submission.pages):
            raise ValidationError("submission contains an empty page payload")
        doc_type = submission.doc_type or self._config.default_doc_type
        if doc_type not in self._config.doc_types:
            raise ValidationError(f"unknown doc_type: {doc_type!r}")
        return doc_type

    def submit(self, submission: Submission) -> str:
        """Validate, persist and enqueue one document; returns its id.

        Page blobs are durable before the worker-queue enqueue. On a storage
        failure nothing is enqueued and the document is marked failed.
        """
        with self._lock:
            if self._closed:
                raise GatewayClosed("gateway is not accepting submissions")
            if submission.idempotency_key is not None:
                existing = self._idempotency.get(submission.idempotency_key)
                if existing is not None:
                    return existing

        doc_type = self._validate(submission)
        document_id = submission.document_id or f"doc-gw-{next(self._ids):07d}"
        if self._tracking.exists(document_id) and submission.document_id is not None:
            if submission.idempotency_key is None:
                raise ValidationError(f"duplicate document_id: {document_id}")

        steps = self._config.steps_for(doc_type)
        self._tracking.create_record(document_id, doc_type, steps, pages=len(submission.pages))
        self._events.emit("submitted", document_id=document_id, source=submission.source)
        if self._faults:
            self._faults.maybe_crash("after_record")

        for index, payload in enumerate(submission.pages):
            if self._faults and self._faults.storage_fault_page == index:
                self._tracking.update_status(
                    document_id, domain.step_failed("ingest", f"storage failure on page {index}")
                )
                self._events.emit(
                    "ingest_failed", document_id=document_id, data_page=index
                )
                raise StorageError(f"{document_id}: storage failure on page {index}")
            self._tracking.blobs.put_blob(domain.page_blob_key(document_id, index), payload)
            if self._faults:
                self._faults.maybe_crash(f"after_page_{index}")

        self._tracking.update_status(document_id, domain.validated())
        if self._faults:
            self._faults.maybe_crash("before_enqueue")
        self._worker_queue.enqueue(document_id)
        self._events.emit("enqueued", document_id=document_id)

        if submission.idempotency_key is not None:
            with self._lock:
                self._idempotency[submission.idempotency_key] = document_id
        return document_id

    # -- status ------------------------------------------------------------------

    def get_status(self, document_id: str) -> dict:
        """Current status plus step timings and the cost summary."""
        record = self._tracking.get(document_id)  # raises NotFound
        cached = self._status_cache.get(document_id)
        return {
            "document_id": document_id,
            "status": record.status.to_dict(),
            "notified_status": cached,
            "doc_type": record.doc_type,
            "pages": record.pages,
            "delivery_count": record.delivery_count,
            "processing_start_time": record.processing_start_time,
            "step_timings": [t.to_dict() for t in record.step_timings],
            "cost_total": round(record.total_cost(), 6),
            "cost_entries": list(record.cost_entries),
            "updated_at": record.updated_at,
        }

    def _consume_status(self) -> None:
        while not self._stop.is_set():
            lease = self._status_queue.receive("gateway-status", 30.0, wait_timeout=0.05)
            if lease is None:
                continue
            note = lease.payload
            if isinstance(note, dict) and "document_id" in note:
                self._status_cache[note["document_id"]] = note.get("status")
            try:
                self._status_queue.ack(lease)
            except Exception:
                logger.exception("status ack failed")

    # -- ingestion queue path -----------------------------------------------------

    def enqueue_submission(self, submission: Submission) -> str:
        """Asynchronous handoff: park the submission and enqueue a reference."""
        with self._lock:
            if self._closed:
                raise GatewayClosed("gateway is not accepting submissions")
            ref = f"ingest-{next(self._ids):07d}"
            self._pending[ref] = submission
        self._ingestion_queue.enqueue(ref)
        return ref

    def _consume_ingestion(self) -> None:
        while not self._stop.is_set():
            lease = self._ingestion_queue.receive("gateway-ingest", 30.0, wait_timeout=0.05)
            if lease is None:
                continue
            ref = str(lease.payload)
            submission = self._pending.pop(ref, None)
            try:
                if submission is not None:
                    submission.source = "ingestion_queue"
                    self.submit(submission)
                self._ingestion_queue.ack(lease)
            except Exception:
                logger.exception("ingestion of %s failed", ref)
                try:
                    self._ingestion_queue.ack(lease)
                except Exception:
                    pass

    # -- arrival patterns ------------------------------------------------------------

    def run_ingestion(
        self,
        pattern: ArrivalPattern,
        submissions: Sequence[Submission],
        on_submitted: Optional[Callable[[str], None]] = None,
    ) -> list[str]:
        """Drive submissions until the corpus is exhausted, following the
        arrival pattern (inter-arrival gaps scaled by time_scale)."""
        ids: list[str] = []
        scale = self._time_scale
        if pattern.mode == "steady":
            gap = (1.0 / pattern.rate_docs_per_s) * scale
            start = self._clock.now()
            for i, submission in enumerate(submissions):
                ids.append(self.submit(submission))
                if on_submitted:
                    on_submitted(ids[-1])
                # deadline pacing: submission work does not stretch the schedule
                self._clock.sleep(start + (i + 1) * gap - self._clock.now())
        elif pattern.mode == "bursty":
            batch_start = self._clock.now()
            for i, submission in enumerate(submissions):
                if i > 0 and i % pattern.batch_size == 0:
                    elapsed = self._clock.now() - batch_start
                    idle = pattern.batch_interval_s * scale - elapsed
                    if idle > 0:
                        self._clock.sleep(idle)
                    batch_start = self._clock.now()
                ids.append(self.submit(submission))
                if on_submitted:
                    on_submitted(ids[-1])
        else:
            raise ValueError(f"unknown arrival mode: {pattern.mode}")
        return ids
