"""The inference service: classify/ocr/detect/parse request handling behind a
GPU-slot capacity limiter.

Two limiter classes share the service: GPU-class requests (local classifier,
OCR, detector) contend for ``gpu_slots``; API-class requests (VLM classify,
VLM detect, parse) contend for a separate ``api_concurrency`` limit modeling
provider rate limits. Requests block FIFO while waiting for a slot; the
number of concurrently executing requests per class never exceeds the class
capacity. Service time is sampled from the backend profile and slept while
the slot is held, which is what makes this tier the system's saturation
ceiling under load.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .clocks import Clock, WallClock
from .store import BlobStore, NotFound
from .worldgen import (
    CalibrationSet,
    EmptyInput,
    OcrWord,
    PagePayload,
    parse_page_payload,
    sample_classifier_outcome,
    sample_detect_outcome,
    sample_latency,
    sample_ocr_result,
    sample_parse_malformed,
    sample_parse_outcome,
)

logger = logging.getLogger(__name__)

GPU_CLASS = "gpu"
API_CLASS = "api"

OP_CLASS = {
    "classify_clip": GPU_CLASS,
    "classify_vlm": API_CLASS,
    "ocr": GPU_CLASS,
    "detect": GPU_CLASS,
    "detect_vlm": API_CLASS,
    "parse": API_CLASS,
}


class InferenceError(Exception):
    pass


class Overloaded(InferenceError):
    """Raised when a bounded wait queue is full."""


class SchemaViolation(InferenceError):
    """Simulated malformed model output or a result violating the schema."""


class NotACoverPage(InferenceError):
    pass


class InferenceUnavailable(InferenceError):
    """The service cannot be reached (HTTP transport failures)."""


@dataclass
class _Ticket:
    event: threading.Event = field(default_factory=threading.Event)
    granted_at: float = 0.0


class SlotLimiter:
    """FIFO slot limiter.

    Grant timestamps are assigned under the limiter lock in strict arrival
    order, so per-class requests start in the order they were queued.
    """

    def __init__(self, capacity: int, clock: Clock, queue_cap: Optional[int] = None) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._clock = clock
        self._queue_cap = queue_cap
        self._lock = threading.Lock()
        self._free = capacity
        self._busy = 0
        self._waiters: deque[_Ticket] = deque()
        self.busy_seconds = 0.0
        self._grant_times: dict[int, float] = {}

    def acquire(self) -> float:
        """Block until a slot is granted; returns the grant timestamp."""
        with self._lock:
            if self._free > 0 and not self._waiters:
                self._free -= 1
                self._busy += 1
                granted = self._clock.now()
                self._grant_times[threading.get_ident()] = granted
                return granted
            if self._queue_cap is not None and len(self._waiters) >= self._queue_cap:
                raise Overloaded(f"wait queue is at its cap ({self._queue_cap})")
            ticket = _Ticket()
            self._waiters.append(ticket)
        ticket.event.wait()
        with self._lock:
            self._grant_times[threading.get_ident()] = ticket.granted_at
        return ticket.granted_at

    def release(self) -> None:
        with self._lock:
            now = self._clock.now()
            granted = self._grant_times.pop(threading.get_ident(), now)
            self.busy_seconds += now - granted
            self._busy -= 1
            if self._waiters:
                ticket = self._waiters.popleft()
                self._busy += 1
                ticket.granted_at = now
                ticket.event.set()
            else:
                self._free += 1

    @property
    def executing(self) -> int:
        with self._lock:
            return self._busy

    @property
    def queue_length(self) -> int:
        with self._lock:
            return len(self._waiters)


@dataclass(frozen=True)
class RequestTiming:
    queued_at: float
    started_at: float
    finished_at: float

    @property
    def queue_wait(self) -> float:
        return self.started_at - self.queued_at

    @property
    def service_time(self) -> float:
        return self.finished_at - self.started_at


@dataclass(frozen=True)
class ClipResult:
    label: str
    confidence: float
    timing: RequestTiming
    cost: float = 0.0


@dataclass(frozen=True)
class VlmClassifyResult:
    label: str
    timing: RequestTiming
    cost: float


@dataclass(frozen=True)
class OcrResult:
    page_index: int
    words: tuple[OcrWord, ...]
    timing: RequestTiming

    def texts(self) -> list[str]:
        return [w.text for w in self.words]


@dataclass(frozen=True)
class DetectResult:
    metadata: dict[str, str]
    backend: str
    timing: RequestTiming
    cost: float


@dataclass(frozen=True)
class ParseResult:
    fields: dict[str, str]
    input_tokens: int
    output_tokens: int
    cost: float
    timing: RequestTiming


@dataclass(frozen=True)
class CostEntry:
    document_id: str
    op: str
    unit_cost: float
    tokens_in: int = 0
    tokens_out: int = 0

    def to_dict(self) -> dict:
        return {
            "document_id": self.document_id,
            "op": self.op,
            "unit_cost": self.unit_cost,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }


class CostLedger:
    """Append-only per-call cost entries; document total = sum of entries."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[CostEntry] = []

    def add(self, entry: CostEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[CostEntry]:
        with self._lock:
            return list(self._entries)

    def entries_for(self, document_id: str) -> list[CostEntry]:
        with self._lock:
            return [e for e in self._entries if e.document_id == document_id]

    def total_for(self, document_id: str) -> float:
        return sum(e.unit_cost for e in self.entries_for(document_id))


@dataclass
class _OpStats:
    count: int = 0
    queue_waits: list[float] = field(default_factory=list)
    service_times: list[float] = field(default_factory=list)
    intervals: list[tuple[float, float]] = field(default_factory=list)  # (started, finished)


@dataclass(frozen=True)
class ServiceStats:
    in_flight: int
    queue_length: int
    slot_utilization: float
    api_utilization: float
    gpu_queue_wait_total: float
    api_queue_wait_total: float
    gpu_service_total: float
    api_service_total: float
    per_op: dict[str, dict]


class InferenceService:
    """Simulated model serving with explicit capacity limits.

    Backends are looked up by operation name from the calibration set, so a
    different backend implementation can replace the samplers without any
    caller-side changes.
    """

    def __init__(
        self,
        blobs: BlobStore,
        calibration: CalibrationSet,
        labels: Sequence[str],
        seed: int,
        time_scale: float,
        gpu_slots: int,
        api_concurrency: int,
        clock: Optional[Clock] = None,
        clip_confidence_threshold: float = 0.7,
        malformed_output_rate: float = 0.0,
        queue_cap: Optional[int] = None,
        ledger: Optional[CostLedger] = None,
    ) -> None:
        self._blobs = blobs
        self._calibration = calibration
        self._labels = tuple(sorted(labels))
        self._seed = seed
        self._time_scale = time_scale
        self._clock = clock or WallClock()
        self._malformed_rate = malformed_output_rate
        self.clip_confidence_threshold = clip_confidence_threshold
        self.gpu = SlotLimiter(gpu_slots, self._clock, queue_cap)
        self.api = SlotLimiter(api_concurrency, self._clock, queue_cap)
        self.ledger = ledger or CostLedger()
        self._stats_lock = threading.Lock()
        self._op_stats: dict[str, _OpStats] = {}
        self._first_queued_at: Optional[float] = None
        self._last_finished_at: Optional[float] = None
        # Page blobs are immutable once enqueued, so parsed payloads cache
        # cleanly; multiple ops on one page fetch its bytes only once.
        self._page_cache: dict[str, PagePayload] = {}
        self._page_cache_order: deque[str] = deque()
        self._page_cache_cap = 8192

    # -- plumbing ------------------------------------------------------------

    def _limiter(self, op: str) -> SlotLimiter:
        return self.gpu if OP_CLASS[op] == GPU_CLASS else self.api

    def _run(self, op: str, service_seconds: float) -> RequestTiming:
        limiter = self._limiter(op)
        queued_at = self._clock.now()
        started_at = limiter.acquire()
        try:
            # Deadline-based: the slot is busy exactly service_seconds from
            # the grant, so scheduler wakeup latency does not stretch it.
            self._clock.sleep(started_at + service_seconds - self._clock.now())
        finally:
            limiter.release()
        finished_at = self._clock.now()
        timing = RequestTiming(queued_at, started_at, finished_at)
        with self._stats_lock:
            stats = self._op_stats.setdefault(op, _OpStats())
            stats.count += 1
            stats.queue_waits.append(timing.queue_wait)
            stats.service_times.append(timing.service_time)
            stats.intervals.append((started_at, finished_at))
            if self._first_queued_at is None or queued_at < self._first_queued_at:
                self._first_queued_at = queued_at
            if self._last_finished_at is None or finished_at > self._last_finished_at:
                self._last_finished_at = finished_at
        return timing

    def _page(self, page_key: str) -> PagePayload:
        cached = self._page_cache.get(page_key)
        if cached is not None:
            return cached
        blob = self._blobs.get_blob(page_key)
        payload = parse_page_payload(blob.data)
        with self._stats_lock:
            if page_key not in self._page_cache:
                self._page_cache[page_key] = payload
                self._page_cache_order.append(page_key)
                while len(self._page_cache_order) > self._page_cache_cap:
                    evicted = self._page_cache_order.popleft()
                    self._page_cache.pop(evicted, None)
        return payload

    # -- operations ------------------------------------------------------------

    def classify_clip(self, page_key: str) -> ClipResult:
        page = self._page(page_key)
        profile = self._calibration.profile("clip")
        latency = sample_latency(
            "classify_clip", profile, self._seed, self._time_scale, page.document_id, page.page_index
        )
        timing = self._run("classify_clip", latency)
        outcome = sample_classifier_outcome(page, "clip", self._seed, self._labels, self._calibration)
        self.ledger.add(CostEntry(page.document_id, "classify_clip", profile.unit_cost))
        return ClipResult(outcome.label, outcome.confidence, timing, profile.unit_cost)

    def classify_vlm(self, page_key: str) -> VlmClassifyResult:
        page = self._page(page_key)
        profile = self._calibration.profile("vlm_classify")
        latency = sample_latency(
            "classify_vlm", profile, self._seed, self._time_scale, page.document_id, page.page_index
        )
        timing = self._run("classify_vlm", latency)
        outcome = sample_classifier_outcome(
            page, "vlm_classify", self._seed, self._labels, self._calibration
        )
        self.ledger.add(CostEntry(page.document_id, "classify_vlm", profile.unit_cost))
        return VlmClassifyResult(outcome.label, timing, profile.unit_cost)

    def ocr_page(self, page_key: str) -> OcrResult:
        page = self._page(page_key)
        profile = self._calibration.profile("ocr")
        latency = sample_latency(
            "ocr", profile, self._seed, self._time_scale, page.document_id, page.page_index
        )
        timing = self._run("ocr", latency)
        words = tuple(sample_ocr_result(page, self._seed))
        self.ledger.add(CostEntry(page.document_id, "ocr", profile.unit_cost))
        return OcrResult(page_index=page.page_index, words=words, timing=timing)

    def detect_metadata(self, page_key: str, backend: str = "detector") -> DetectResult:
        if backend not in ("detector", "vlm"):
            raise ValueError(f"unknown detect backend: {backend}")
        page = self._page(page_key)
        if not page.is_cover:
            raise NotACoverPage(f"{page.document_id} page {page.page_index} is not a cover page")
        if backend == "detector":
            profile = self._calibration.profile("detect")
            op = "detect"
        else:
            profile = self._calibration.profile("vlm_classify")
            op = "detect_vlm"
        latency = sample_latency(
            op, profile, self._seed, self._time_scale, page.document_id, page.page_index
        )
        timing = self._run(op, latency)
        metadata = sample_detect_outcome(page, profile, self._seed)
        self.ledger.add(CostEntry(page.document_id, op, profile.unit_cost))
        return DetectResult(metadata=metadata, backend=backend, timing=timing, cost=profile.unit_cost)

    def parse_document(
        self,
        document_id: str,
        text_words: Sequence[str],
        schema: Sequence[str],
        true_fields: Optional[dict] = None,
        retry_index: int = 1,
    ) -> ParseResult:
        """Parse stitched text into the fields named by *schema*.

        ``true_fields`` rides along from the stitched payload (the simulator
        needs ground truth to model extraction accuracy); callers pass the
        values recovered from the page payloads.
        """
        if not text_words:
            raise EmptyInput("parse: stitched text is empty")
        if not schema:
            raise SchemaViolation("parse: empty field schema")
        profile = self._calibration.profile("parse")
        latency = sample_latency(
            "parse", profile, self._seed, self._time_scale, document_id, None
        )
        timing = self._run("parse", latency)
        if sample_parse_malformed(document_id, self._seed, self._malformed_rate, retry_index):
            raise SchemaViolation(f"{document_id}: model output did not match the schema")
        outcome = sample_parse_outcome(
            document_id,
            text_words,
            schema,
            true_fields or {},
            profile,
            self._seed,
            retry_index=retry_index,
        )
        missing = [f for f in schema if f not in outcome.fields]
        if missing:
            raise SchemaViolation(f"{document_id}: missing fields {missing}")
        self.ledger.add(
            CostEntry(
                document_id,
                "parse",
                outcome.cost,
                tokens_in=outcome.input_tokens,
                tokens_out=outcome.output_tokens,
            )
        )
        return ParseResult(
            fields=outcome.fields,
            input_tokens=outcome.input_tokens,
            output_tokens=outcome.output_tokens,
            cost=outcome.cost,
            timing=timing,
        )

    # -- observability ----------------------------------------------------------

    def service_stats(self) -> ServiceStats:
        with self._stats_lock:
            per_op = {
                op: {
                    "count": s.count,
                    "queue_waits": list(s.queue_waits),
                    "service_times": list(s.service_times),
                    "intervals": list(s.intervals),
                }
                for op, s in self._op_stats.items()
            }
            window_start = self._first_queued_at
            window_end = self._last_finished_at
        gpu_busy = self.gpu.busy_seconds
        api_busy = self.api.busy_seconds
        if window_start is None or window_end is None or window_end <= window_start:
            gpu_util = 0.0
            api_util = 0.0
        else:
            window = window_end - window_start
            gpu_util = min(1.0, gpu_busy / (self.gpu.capacity * window))
            api_util = min(1.0, api_busy / (self.api.capacity * window))

        def _class_totals(cls: str, key: str) -> float:
            return sum(
                sum(per_op[op][key])
                for op in per_op
                if OP_CLASS[op] == cls
            )

        return ServiceStats(
            in_flight=self.gpu.executing + self.api.executing,
            queue_length=self.gpu.queue_length + self.api.queue_length,
            slot_utilization=gpu_util,
            api_utilization=api_util,
            gpu_queue_wait_total=_class_totals(GPU_CLASS, "queue_waits"),
            api_queue_wait_total=_class_totals(API_CLASS, "queue_waits"),
            gpu_service_total=_class_totals(GPU_CLASS, "service_times"),
            api_service_total=_class_totals(API_CLASS, "service_times"),
            per_op=per_op,
        )


class InferenceClient(Protocol):
    """What workers need from the inference tier, regardless of transport."""

    def classify_clip(self, page_key: str) -> ClipResult: ...

    def classify_vlm(self, page_key: str) -> VlmClassifyResult: ...

    def ocr_page(self, page_key: str) -> OcrResult: ...

    def detect_metadata(self, page_key: str, backend: str = "detector") -> DetectResult: ...

    def parse_document(
        self,
        document_id: str,
        text_words: Sequence[str],
        schema: Sequence[str],
        true_fields: Optional[dict] = None,
        retry_index: int = 1,
    ) -> ParseResult: ...


class InProcessInferenceClient:
    """Direct in-process client; same contract as the HTTP client."""

    def __init__(self, service: InferenceService) -> None:
        self._service = service

    def classify_clip(self, page_key: str) -> ClipResult:
        return self._service.classify_clip(page_key)

    def classify_vlm(self, page_key: str) -> VlmClassifyResult:
        return self._service.classify_vlm(page_key)

    def ocr_page(self, page_key: str) -> OcrResult:
        return self._service.ocr_page(page_key)

    def detect_metadata(self, page_key: str, backend: str = "detector") -> DetectResult:
        return self._service.detect_metadata(page_key, backend)

    def parse_document(
        self,
        document_id: str,
        text_words: Sequence[str],
        schema: Sequence[str],
        true_fields: Optional[dict] = None,
        retry_index: int = 1,
    ) -> ParseResult:
        return self._service.parse_document(
            document_id, text_words, schema, true_fields, retry_index
        )
