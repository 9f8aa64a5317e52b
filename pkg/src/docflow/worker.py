"""Pipeline orchestration: worker pods, step execution, checkpoint/resume,
hybrid classification routing and staleness detection.

Each pod runs ``tasks_per_pod`` concurrent document executors. Within one
document, steps run strictly sequentially; across documents all inference
waits overlap. Every received lease ends in exactly one of: ack after
completion, ack after terminal failure, or abandonment/nack leading to queue
redelivery.

Status updates are fenced by delivery attempt (see
:class:`docflow.store.TrackingStore`), so an executor whose lease has expired
("zombie") cannot clobber the record of the live lease holder; it aborts on
its first rejected update.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import domain
from .clocks import Clock, WallClock
from .config import PipelineConfig
from .domain import InvalidTransition, StaleWriter, StatusKind
from .events import EventLog
from .inference import InferenceClient, InferenceUnavailable, SchemaViolation
from .mqueue import Lease, LeaseExpired, MessageQueue, UnknownLease
from .store import TrackingRecord, TrackingStore, canonical_json
from .worldgen import CalibrationSet, default_calibration, sample_latency

logger = logging.getLogger(__name__)


class StepError(Exception):
    def __init__(self, step: str, cause: str) -> None:
        self.step = step
        self.cause = cause
        super().__init__(f"step {step} failed: {cause}")


class MissingPage(StepError):
    def __init__(self, page_index: int) -> None:
        super().__init__("stitch", f"missing OCR output for page {page_index}")
        self.page_index = page_index


class SimulatedCrash(Exception):
    """Raised by fault hooks / pod kill to model abrupt worker death."""


class _ZombieFenced(Exception):
    """Internal: a status update was rejected because a newer delivery owns
    the record."""


@dataclass
class FaultHooks:
    """Test instrumentation points. Hooks may raise SimulatedCrash."""

    after_step: Optional[Callable[[str, str], None]] = None
    before_first_inference: Optional[Callable[[str], None]] = None


class OwnershipProbe:
    """Instrumented check that no document ever has two concurrent executors
    while any lease is unexpired."""

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self._clock = clock or WallClock()
        self._lock = threading.Lock()
        self._active: dict[str, list[Lease]] = {}
        self.violations: list[str] = []

    def enter(self, document_id: str, lease: Lease) -> None:
        with self._lock:
            now = self._clock.now()
            live = [l for l in self._active.get(document_id, []) if l.deadline > now]
            if any(l.deadline > now for l in live) and lease.deadline > now:
                self.violations.append(
                    f"{document_id}: concurrent executors with live leases "
                    f"({[l.lease_id for l in live]} + {lease.lease_id})"
                )
            self._active.setdefault(document_id, []).append(lease)

    def exit(self, document_id: str, lease: Lease) -> None:
        with self._lock:
            leases = self._active.get(document_id, [])
            self._active[document_id] = [l for l in leases if l.lease_id != lease.lease_id]


def majority_route(page_labels: Sequence[str]) -> str:
    """Document route: majority label, ties broken by earliest page."""
    counts = Counter(page_labels)
    best = max(counts.values())
    tied = {label for label, c in counts.items() if c == best}
    for label in page_labels:
        if label in tied:
            return label
    raise ValueError("no page labels")


def detect_stale(
    records: Sequence[TrackingRecord], stale_threshold: float, now: float
) -> list[str]:
    """Documents whose first inference call started more than
    ``stale_threshold`` ago and which are still processing.

    Documents waiting without any inference call are never stale; terminal
    documents are never stale.
    """
    stale = []
    for record in records:
        if record.status.kind is not StatusKind.PROCESSING:
            continue
        if record.processing_start_time is None:
            continue
        if now - record.processing_start_time > stale_threshold:
            stale.append(record.document_id)
    return stale


class StaleSweeper:
    """Applies stale transitions for documents flagged by detect_stale."""

    def __init__(
        self,
        tracking: TrackingStore,
        stale_threshold_scaled: float,
        event_log: EventLog,
        clock: Optional[Clock] = None,
    ) -> None:
        self._tracking = tracking
        self._threshold = stale_threshold_scaled
        self._events = event_log
        self._clock = clock or WallClock()

    def run_once(self) -> list[str]:
        now = self._clock.now()
        stale_ids = detect_stale(self._tracking.snapshot(), self._threshold, now)
        marked = []
        for document_id in stale_ids:
            record = self._tracking.get(document_id)
            try:
                self._tracking.update_status(
                    document_id, domain.stale_detected(record.delivery_count)
                )
            except (InvalidTransition, StaleWriter):
                continue  # completed or redelivered between snapshot and update
            self._events.emit("stale_marked", document_id=document_id)
            marked.append(document_id)
        return marked


@dataclass
class StepContext:
    """Accumulated state for one document execution attempt."""

    document_id: str
    doc_type: str
    page_keys: list[str]
    steps: tuple[str, ...]
    attempt: int
    outputs: dict[str, dict] = field(default_factory=dict)
    inference_marked: bool = False


class WorkerPod:
    """One pod: a set of concurrent document executors sharing nothing but
    the queue, store and inference client handles."""

    def __init__(
        self,
        pod_id: str,
        worker_queue: MessageQueue,
        status_queue: MessageQueue,
        tracking: TrackingStore,
        inference: InferenceClient,
        config: PipelineConfig,
        event_log: EventLog,
        seed: int,
        time_scale: float,
        clock: Optional[Clock] = None,
        tasks: Optional[int] = None,
        fault_hooks: Optional[FaultHooks] = None,
        ownership_probe: Optional[OwnershipProbe] = None,
        calibration: Optional[CalibrationSet] = None,
        metadata_backend: str = "detector",
        poll_wait: float = 0.05,
    ) -> None:
        self.pod_id = pod_id
        self._queue = worker_queue
        self._status_queue = status_queue
        self._tracking = tracking
        self._inference = inference
        self._config = config
        self._events = event_log
        self._seed = seed
        self._time_scale = time_scale
        self._clock = clock or WallClock()
        self._calibration = calibration or default_calibration(
            config.profile_overrides or None, config.confidence_model
        )
        self._tasks = tasks if tasks is not None else config.tasks_per_pod
        self._hooks = fault_hooks or FaultHooks()
        self._probe = ownership_probe
        self._metadata_backend = metadata_backend
        self._poll_wait = poll_wait
        self._stop = threading.Event()
        self._killed = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        if self._threads:
            raise RuntimeError(f"{self.pod_id}: already started")
        for i in range(self._tasks):
            thread = threading.Thread(
                target=self._task_loop,
                name=f"{self.pod_id}-task{i}",
                args=(i,),
                daemon=True,
            )
            self._threads.append(thread)
            thread.start()

    def stop(self, timeout: float = 10.0) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=timeout)
        self._threads = []

    def kill(self) -> None:
        """Abrupt death: in-flight documents are abandoned at the next step
        boundary without ack or nack; their leases expire and redeliver."""
        self._killed.set()
        self._stop.set()

    @property
    def running(self) -> bool:
        return any(t.is_alive() for t in self._threads)

    # -- main loop -----------------------------------------------------------

    def _task_loop(self, task_index: int) -> None:
        holder = f"{self.pod_id}-task{task_index}"
        visibility = self._config.visibility_timeout * self._time_scale
        while not self._stop.is_set():
            self._fail_dead_letters()
            lease = self._queue.receive(holder, visibility, wait_timeout=self._poll_wait)
            if lease is None:
                continue
            try:
                self._handle_lease(lease)
            except SimulatedCrash:
                self._events.emit(
                    "worker_crashed",
                    document_id=str(lease.payload),
                    pod=self.pod_id,
                    attempt=lease.delivery_count,
                )
                if self._killed.is_set():
                    return
            except Exception:
                logger.exception("%s: unhandled error processing %s", holder, lease.payload)
                self._events.emit(
                    "executor_error", document_id=str(lease.payload), pod=self.pod_id
                )

    def _fail_dead_letters(self) -> None:
        for message in self._queue.drain_dead_letters():
            document_id = str(message.payload)
            self._events.emit(
                "dead_letter",
                document_id=document_id,
                pod=self.pod_id,
                attempt=message.delivery_count,
            )
            try:
                record = self._tracking.get(document_id)
                if not record.status.terminal:
                    self._tracking.update_status(
                        document_id,
                        domain.step_failed(
                            "delivery", "max_retries", attempt=message.delivery_count
                        ),
                    )
                    self._publish_status(document_id, "failed")
            except Exception:
                logger.exception("dead-letter handling failed for %s", document_id)

    # -- lease handling ---------------------------------------------------------

    def _handle_lease(self, lease: Lease) -> None:
        document_id = str(lease.payload)
        received_at = self._clock.now()
        self._events.emit(
            "lease_received",
            document_id=document_id,
            pod=self.pod_id,
            attempt=lease.delivery_count,
        )
        try:
            record = self._tracking.get(document_id)
        except Exception:
            self._events.emit("orphan_message", document_id=document_id, pod=self.pod_id)
            self._ack(lease, document_id)
            return

        if record.status.terminal:
            # At-least-once artifact: the message outlived a completed run.
            self._events.emit(
                "redelivered_terminal",
                document_id=document_id,
                pod=self.pod_id,
                attempt=lease.delivery_count,
            )
            self._ack(lease, document_id)
            return

        if record.doc_type not in self._config.doc_types:
            self._tracking.update_status(
                document_id,
                domain.step_failed("config", "unknown_doc_type", attempt=lease.delivery_count),
            )
            self._events.emit("doc_failed", document_id=document_id, reason="unknown_doc_type")
            self._publish_status(document_id, "failed")
            self._ack(lease, document_id)
            return

        if self._probe is not None:
            self._probe.enter(document_id, lease)
        try:
            self._process_document(lease, record, received_at)
        except _ZombieFenced:
            self._events.emit(
                "zombie_abort",
                document_id=document_id,
                pod=self.pod_id,
                attempt=lease.delivery_count,
            )
        except StepError as exc:
            self._events.emit(
                "step_error",
                document_id=document_id,
                pod=self.pod_id,
                step=exc.step,
                attempt=lease.delivery_count,
                cause=exc.cause,
            )
            self._nack(lease, document_id)
        finally:
            if self._probe is not None:
                self._probe.exit(document_id, lease)

    def _check_kill(self, document_id: str, step: str) -> None:
        if self._killed.is_set():
            raise SimulatedCrash(f"{self.pod_id} killed during {document_id}:{step}")
        if self._hooks.after_step is not None:
            self._hooks.after_step(document_id, step)

    def _process_document(self, lease: Lease, record: TrackingRecord, received_at: float) -> None:
        document_id = record.document_id
        attempt = lease.delivery_count
        steps = record.steps
        ctx = StepContext(
            document_id=document_id,
            doc_type=record.doc_type,
            page_keys=[domain.page_blob_key(document_id, i) for i in range(record.pages)],
            steps=steps,
            attempt=attempt,
            inference_marked=record.processing_start_time is not None,
        )

        # Resume: load the contiguous prefix of checkpointed step outputs.
        checkpointed = self._tracking.checkpointed_outputs(document_id)
        for step, payload in checkpointed.items():
            ctx.outputs[step] = json.loads(payload.decode("utf-8"))
            self._events.emit(
                "step_skipped", document_id=document_id, pod=self.pod_id, step=step, attempt=attempt
            )
        remaining = [s for s in steps if s not in ctx.outputs]

        try:
            if record.status.kind in (StatusKind.PROCESSING, StatusKind.STALE):
                self._update(document_id, domain.redelivered(attempt))
            first_step = remaining[0] if remaining else steps[-1]
            self._update(document_id, domain.worker_pulled(first_step, attempt))
            for index, step in enumerate(remaining):
                self._run_step_with_retry(ctx, step)
                next_step = remaining[index + 1] if index + 1 < len(remaining) else None
                self._update(document_id, domain.step_completed(step, next_step, attempt))
                self._check_kill(document_id, step)
            self._complete(ctx, lease, received_at)
        except (InvalidTransition, StaleWriter) as exc:
            if isinstance(exc, InvalidTransition):
                # Terminal collision: another executor finished this document.
                raise _ZombieFenced(str(exc)) from exc
            raise _ZombieFenced(str(exc)) from exc

    def _update(self, document_id: str, event) -> None:
        try:
            self._tracking.update_status(document_id, event)
        except StaleWriter as exc:
            raise _ZombieFenced(str(exc)) from exc

    def _run_step_with_retry(self, ctx: StepContext, step: str) -> None:
        document_id = ctx.document_id
        self._tracking.record_step_start(document_id, step, ctx.attempt)
        started = self._clock.now()
        self._events.emit(
            "step_start", document_id=document_id, pod=self.pod_id, step=step, attempt=ctx.attempt
        )
        attempts_allowed = 1 + self._config.step_retry_limit
        last_error: Optional[str] = None
        for retry_index in range(1, attempts_allowed + 1):
            try:
                output = self._run_step(ctx, step, retry_index)
                break
            except (SchemaViolation, InferenceUnavailable) as exc:
                last_error = str(exc)
                self._events.emit(
                    "step_retry",
                    document_id=document_id,
                    pod=self.pod_id,
                    step=step,
                    attempt=ctx.attempt,
                    retry_index=retry_index,
                    cause=last_error,
                )
        else:
            raise StepError(step, last_error or "retries exhausted")
        ctx.outputs[step] = output
        payload = canonical_json(output).encode("utf-8")
        self._tracking.save_checkpoint(document_id, step, payload, ctx.attempt)
        self._events.emit(
            "step_finish",
            document_id=document_id,
            pod=self.pod_id,
            step=step,
            attempt=ctx.attempt,
            wall_duration=self._clock.now() - started,
        )

    # -- steps ------------------------------------------------------------------

    def _mark_inference(self, ctx: StepContext) -> None:
        if not ctx.inference_marked:
            if self._hooks.before_first_inference is not None:
                self._hooks.before_first_inference(ctx.document_id)
            self._tracking.mark_inference_started(ctx.document_id)
            self._events.emit(
                "inference_started", document_id=ctx.document_id, pod=self.pod_id
            )
            ctx.inference_marked = True

    def _run_step(self, ctx: StepContext, step: str, retry_index: int) -> dict:
        if step == "classify":
            return self._step_classify_hybrid(ctx)
        if step == "metadata":
            return self._step_metadata(ctx)
        if step == "ocr":
            return self._step_ocr(ctx)
        if step == "stitch":
            return self._step_stitch(ctx)
        if step == "parse":
            return self._step_parse(ctx, retry_index)
        raise StepError(step, "unknown step")

    def _step_classify_hybrid(self, ctx: StepContext) -> dict:
        threshold = self._config.clip_confidence_threshold
        page_labels: list[str] = []
        confidences: list[float] = []
        fallback_pages: list[int] = []
        for index, key in enumerate(ctx.page_keys):
            self._mark_inference(ctx)
            clip = self._retry_page_call(ctx, "classify", lambda: self._inference.classify_clip(key))
            if clip.confidence > threshold:
                page_labels.append(clip.label)
            else:
                fallback_pages.append(index)
                vlm = self._retry_page_call(
                    ctx, "classify", lambda: self._inference.classify_vlm(key)
                )
                page_labels.append(vlm.label)
            confidences.append(round(clip.confidence, 6))
        return {
            "page_labels": page_labels,
            "confidences": confidences,
            "fallback_pages": fallback_pages,
            "route": majority_route(page_labels),
        }

    def _step_metadata(self, ctx: StepContext) -> dict:
        self._mark_inference(ctx)
        result = self._retry_page_call(
            ctx,
            "metadata",
            lambda: self._inference.detect_metadata(ctx.page_keys[0], self._metadata_backend),
        )
        return {"metadata": dict(result.metadata), "backend": result.backend}

    def _step_ocr(self, ctx: StepContext) -> dict:
        pages: list[Optional[dict]] = [None] * len(ctx.page_keys)
        blobs = self._tracking.blobs
        sub_prefix = f"checkpoints/{ctx.document_id}/ocr.pages/"
        if self._config.ocr_page_checkpoints:
            for index in range(len(ctx.page_keys)):
                key = sub_prefix + str(index)
                if blobs.exists(key):
                    pages[index] = json.loads(blobs.get_blob(key).data.decode("utf-8"))
                    self._events.emit(
                        "ocr_page_skipped",
                        document_id=ctx.document_id,
                        pod=self.pod_id,
                        attempt=ctx.attempt,
                        page_index=index,
                    )
        for index, key in enumerate(ctx.page_keys):
            if pages[index] is not None:
                continue
            self._mark_inference(ctx)
            result = self._retry_page_call(ctx, "ocr", lambda: self._inference.ocr_page(key))
            page_dict = {
                "page_index": result.page_index,
                "words": [
                    {"text": w.text, "box": list(w.box), "confidence": w.confidence}
                    for w in result.words
                ],
            }
            pages[index] = page_dict
            if self._config.ocr_page_checkpoints:
                blobs.put_blob(
                    sub_prefix + str(index), canonical_json(page_dict).encode("utf-8")
                )
        return {"pages": pages}

    def _step_stitch(self, ctx: StepContext) -> dict:
        ocr_output = ctx.outputs.get("ocr")
        if ocr_output is None:
            raise MissingPage(0)
        pages = ocr_output["pages"]
        words: list[str] = []
        boundaries: dict[str, list[int]] = {}
        for index, page in enumerate(pages):
            if page is None:
                raise MissingPage(index)
            start = len(words)
            words.extend(w["text"] for w in page["words"])
            boundaries[str(index)] = [start, len(words)]
        # Stitching is local CPU work; simulate its (small) cost.
        self._clock.sleep(
            sample_latency(
                "stitch",
                self._calibration.profile("stitch"),
                self._seed,
                self._time_scale,
                ctx.document_id,
                None,
            )
        )
        return {"words": words, "boundaries": boundaries}

    def _step_parse(self, ctx: StepContext, retry_index: int) -> dict:
        stitched = ctx.outputs.get("stitch")
        if stitched is None:
            raise StepError("parse", "stitched text missing")
        classify_output = ctx.outputs.get("classify")
        route = classify_output["route"] if classify_output else ctx.doc_type
        if route not in self._config.doc_types:
            raise StepError("parse", f"no schema for route {route!r}")
        schema = list(self._config.fields_for(route))
        self._mark_inference(ctx)
        result = self._inference.parse_document(
            ctx.document_id, stitched["words"], schema, retry_index=retry_index
        )
        return {
            "route": route,
            "fields": result.fields,
            "input_tokens": result.input_tokens,
            "output_tokens": result.output_tokens,
            "cost": result.cost,
        }

    def _retry_page_call(self, ctx: StepContext, step: str, call):
        attempts_allowed = 1 + self._config.page_retry_limit
        last: Optional[Exception] = None
        for _ in range(attempts_allowed):
            try:
                return call()
            except InferenceUnavailable as exc:
                last = exc
                self._events.emit(
                    "page_retry",
                    document_id=ctx.document_id,
                    pod=self.pod_id,
                    step=step,
                    attempt=ctx.attempt,
                    cause=str(exc),
                )
        raise StepError(step, str(last) if last else "page retries exhausted")

    # -- completion ----------------------------------------------------------------

    def _complete(self, ctx: StepContext, lease: Lease, received_at: float) -> None:
        document_id = ctx.document_id
        result = self._build_result(ctx)
        result_bytes = canonical_json(result).encode("utf-8")
        self._tracking.blobs.put_blob(domain.result_blob_key(document_id), result_bytes)
        self._tracking.record_costs(document_id, result["costs"]["entries"])
        try:
            self._tracking.update_status(document_id, domain.all_steps_completed(ctx.attempt))
        except (InvalidTransition, StaleWriter) as exc:
            # A full duplicate result was produced by a lapsed executor.
            self._events.emit(
                "duplicate_completion",
                document_id=document_id,
                pod=self.pod_id,
                attempt=ctx.attempt,
                cause=str(exc),
            )
            return
        self._publish_status(document_id, "completed")
        self._events.emit(
            "doc_completed",
            document_id=document_id,
            pod=self.pod_id,
            attempt=ctx.attempt,
            wall_duration=self._clock.now() - received_at,
            cost_actual=result["costs"]["total"],
            pages=len(ctx.page_keys),
        )
        self._ack(lease, document_id)

    def _build_result(self, ctx: StepContext) -> dict:
        classify_output = ctx.outputs.get("classify")
        parse_output = ctx.outputs.get("parse")
        metadata_output = ctx.outputs.get("metadata")
        entries: list[dict] = []
        if classify_output:
            for _ in classify_output["fallback_pages"]:
                entries.append({"op": "classify_vlm", "unit_cost": 0.010})
        if metadata_output and metadata_output["backend"] == "vlm":
            entries.append({"op": "detect_vlm", "unit_cost": 0.010})
        if parse_output:
            entries.append(
                {
                    "op": "parse",
                    "unit_cost": parse_output["cost"],
                    "tokens_in": parse_output["input_tokens"],
                    "tokens_out": parse_output["output_tokens"],
                }
            )
        total = round(sum(e["unit_cost"] for e in entries), 6)
        return {
            "document_id": ctx.document_id,
            "doc_type": ctx.doc_type,
            "route": (classify_output or {}).get("route", ctx.doc_type),
            "page_labels": (classify_output or {}).get("page_labels", []),
            "metadata": (metadata_output or {}).get("metadata", {}),
            "fields": (parse_output or {}).get("fields", {}),
            "input_tokens": (parse_output or {}).get("input_tokens", 0),
            "output_tokens": (parse_output or {}).get("output_tokens", 0),
            "costs": {"entries": entries, "total": total},
        }

    def _publish_status(self, document_id: str, status: str) -> None:
        try:
            self._status_queue.enqueue({"document_id": document_id, "status": status})
        except Exception:
            logger.exception("failed to publish status for %s", document_id)

    def _ack(self, lease: Lease, document_id: str) -> None:
        try:
            self._queue.ack(lease)
            self._events.emit("lease_acked", document_id=document_id, pod=self.pod_id)
        except LeaseExpired:
            self._events.emit("lease_expired_on_ack", document_id=document_id, pod=self.pod_id)
        except UnknownLease:
            self._events.emit("lease_unknown_on_ack", document_id=document_id, pod=self.pod_id)

    def _nack(self, lease: Lease, document_id: str) -> None:
        try:
            self._queue.nack(lease)
            self._events.emit("lease_nacked", document_id=document_id, pod=self.pod_id)
        except (LeaseExpired, UnknownLease):
            self._events.emit("lease_expired_on_nack", document_id=document_id, pod=self.pod_id)
