"""Core domain types: document model, processing status machine, step names.

These are pure value types plus pure functions; they carry no locks and are
safe to share between concurrent tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

PIPELINE_STEPS = ("classify", "metadata", "ocr", "stitch", "parse")


class DomainError(Exception):
    """Base class for domain-level errors."""


class InvalidTransition(DomainError):
    """Raised for a (status, event) pair that is not in the transition table."""

    def __init__(self, status: "DocumentStatus", event: "StatusEvent") -> None:
        self.status = status
        self.event = event
        super().__init__(f"no transition from {status} on {event}")


class StaleWriter(DomainError):
    """Raised when a writer with an outdated delivery attempt tries to update
    a document record (fencing: the live lease holder always wins)."""


@dataclass(frozen=True)
class PageRef:
    """Lightweight reference to one page of a document."""

    document_id: str
    page_index: int
    blob_key: str

    def __post_init__(self) -> None:
        if self.page_index < 0:
            raise ValueError("page_index must be >= 0")
        if not self.blob_key:
            raise ValueError("blob_key must be non-empty")


@dataclass(frozen=True)
class Document:
    """A submitted multi-page unit. Pages are in submission order."""

    id: str
    pages: tuple[PageRef, ...]
    doc_type: str
    submitted_at: float

    def __post_init__(self) -> None:
        if not self.pages:
            raise ValueError("a document must have at least one page")
        indices = [p.page_index for p in self.pages]
        if indices != list(range(len(self.pages))):
            raise ValueError("page_index values must be contiguous from 0")


def page_blob_key(document_id: str, page_index: int) -> str:
    return f"pages/{document_id}/{page_index}"


def result_blob_key(document_id: str) -> str:
    return f"results/{document_id}"


class StatusKind(str, Enum):
    SUBMITTED = "submitted"
    QUEUED = "queued"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"
    STALE = "stale"


TERMINAL_KINDS = frozenset({StatusKind.COMPLETED, StatusKind.FAILED})


@dataclass(frozen=True)
class DocumentStatus:
    """Processing state of a document.

    ``step`` is set only for PROCESSING (the step currently executing);
    ``reason`` only for FAILED.
    """

    kind: StatusKind
    step: Optional[str] = None
    reason: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.kind in TERMINAL_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "step": self.step, "reason": self.reason}

    @classmethod
    def from_dict(cls, data: dict) -> "DocumentStatus":
        return cls(kind=StatusKind(data["kind"]), step=data.get("step"), reason=data.get("reason"))


SUBMITTED = DocumentStatus(StatusKind.SUBMITTED)
QUEUED = DocumentStatus(StatusKind.QUEUED)
COMPLETED = DocumentStatus(StatusKind.COMPLETED)
STALE = DocumentStatus(StatusKind.STALE)


def processing(step: str) -> DocumentStatus:
    return DocumentStatus(StatusKind.PROCESSING, step=step)


def failed(reason: str) -> DocumentStatus:
    return DocumentStatus(StatusKind.FAILED, reason=reason)


class EventKind(str, Enum):
    VALIDATED = "validated"
    WORKER_PULLED = "worker_pulled"
    STEP_COMPLETED = "step_completed"
    ALL_STEPS_COMPLETED = "all_steps_completed"
    STEP_FAILED = "step_failed"
    STALE_DETECTED = "stale_detected"
    REDELIVERED = "redelivered"


@dataclass(frozen=True)
class StatusEvent:
    """An event driving the document status machine.

    ``attempt`` is the queue delivery count of the lease under which the
    event was produced (0 for gateway-side events). ``step`` names the step
    the event refers to; ``next_step`` is the step that starts after a
    STEP_COMPLETED (None when the completed step was the last one).
    """

    kind: EventKind
    step: Optional[str] = None
    next_step: Optional[str] = None
    reason: Optional[str] = None
    attempt: int = 0

    def idempotency_key(self) -> tuple:
        return (self.kind.value, self.step, self.attempt)


def validated() -> StatusEvent:
    return StatusEvent(EventKind.VALIDATED)


def worker_pulled(first_step: str, attempt: int) -> StatusEvent:
    return StatusEvent(EventKind.WORKER_PULLED, step=first_step, attempt=attempt)


def step_completed(step: str, next_step: Optional[str], attempt: int) -> StatusEvent:
    return StatusEvent(EventKind.STEP_COMPLETED, step=step, next_step=next_step, attempt=attempt)


def all_steps_completed(attempt: int) -> StatusEvent:
    return StatusEvent(EventKind.ALL_STEPS_COMPLETED, attempt=attempt)


def step_failed(step: str, reason: str, attempt: int = 0) -> StatusEvent:
    return StatusEvent(EventKind.STEP_FAILED, step=step, reason=reason, attempt=attempt)


def stale_detected(attempt: int) -> StatusEvent:
    return StatusEvent(EventKind.STALE_DETECTED, attempt=attempt)


def redelivered(attempt: int) -> StatusEvent:
    return StatusEvent(EventKind.REDELIVERED, attempt=attempt)


def transition(status: DocumentStatus, event: StatusEvent) -> DocumentStatus:
    """Apply *event* to *status* and return the unique successor status.

    Transition table (everything else raises :class:`InvalidTransition`;
    COMPLETED and FAILED are terminal and reject all events):

    ========== ===================== =======================================
    status      event                 successor
    ========== ===================== =======================================
    SUBMITTED   VALIDATED             QUEUED
    SUBMITTED   STEP_FAILED           FAILED(reason)        (ingest failures)
    QUEUED      WORKER_PULLED(s)      PROCESSING(s)
    QUEUED      STEP_FAILED           FAILED(reason)        (dead-letter)
    PROCESSING  STEP_COMPLETED(s,n)   PROCESSING(n) [or PROCESSING(s) if n
    (s)                               is None; event step must equal s]
    PROCESSING  ALL_STEPS_COMPLETED   COMPLETED
    PROCESSING  STEP_FAILED           FAILED(reason)
    PROCESSING  STALE_DETECTED        STALE
    PROCESSING  REDELIVERED           QUEUED
    STALE       STEP_COMPLETED(s,n)   PROCESSING(n or s)   (worker was slow,
    STALE       ALL_STEPS_COMPLETED   COMPLETED             not dead)
    STALE       STEP_FAILED           FAILED(reason)
    STALE       STALE_DETECTED        STALE
    STALE       REDELIVERED           QUEUED
    ========== ===================== =======================================
    """
    kind, ekind = status.kind, event.kind

    if status.terminal:
        raise InvalidTransition(status, event)

    if kind is StatusKind.SUBMITTED:
        if ekind is EventKind.VALIDATED:
            return QUEUED
        if ekind is EventKind.STEP_FAILED:
            return failed(event.reason or "unknown")
        raise InvalidTransition(status, event)

    if kind is StatusKind.QUEUED:
        if ekind is EventKind.WORKER_PULLED:
            if not event.step:
                raise InvalidTransition(status, event)
            return processing(event.step)
        if ekind is EventKind.STEP_FAILED:
            return failed(event.reason or "unknown")
        raise InvalidTransition(status, event)

    if kind is StatusKind.PROCESSING:
        if ekind is EventKind.STEP_COMPLETED:
            if event.step != status.step:
                raise InvalidTransition(status, event)
            return processing(event.next_step or event.step)
        if ekind is EventKind.ALL_STEPS_COMPLETED:
            return COMPLETED
        if ekind is EventKind.STEP_FAILED:
            return failed(event.reason or "unknown")
        if ekind is EventKind.STALE_DETECTED:
            return STALE
        if ekind is EventKind.REDELIVERED:
            return QUEUED
        raise InvalidTransition(status, event)

    if kind is StatusKind.STALE:
        if ekind is EventKind.STEP_COMPLETED:
            if not event.step:
                raise InvalidTransition(status, event)
            return processing(event.next_step or event.step)
        if ekind is EventKind.ALL_STEPS_COMPLETED:
            return COMPLETED
        if ekind is EventKind.STEP_FAILED:
            return failed(event.reason or "unknown")
        if ekind is EventKind.STALE_DETECTED:
            return STALE
        if ekind is EventKind.REDELIVERED:
            return QUEUED
        raise InvalidTransition(status, event)

    raise InvalidTransition(status, event)


def ordered_steps(steps: Iterable[str]) -> list[str]:
    """Return *steps* as a list, checking each is a known pipeline step."""
    out = []
    for s in steps:
        if s not in PIPELINE_STEPS:
            raise ValueError(f"unknown pipeline step: {s!r}")
        out.append(s)
    return out
