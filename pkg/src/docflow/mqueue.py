"""In-process message queue with visibility-timeout leases.

Semantics:

- ``enqueue`` makes a message visible; receive order among visible messages
  is FIFO by original enqueue sequence (a redelivered message keeps its
  original position).
- ``receive`` issues a :class:`Lease` with ``deadline = now + visibility_timeout``
  and hides the message. If the lease expires without ack/nack the message
  becomes visible again (at-least-once delivery).
- At most one unexpired lease exists per message at any instant.
- Expiry is evaluated lazily on receive/ack/nack/depth and on explicit
  ``sweep_expired``; there is no background timer, so tests with a manual
  clock are fully deterministic.
- Messages whose delivery count would exceed ``max_delivery`` are routed to a
  dead-letter list instead of being delivered.

Payloads must be lightweight references (document ids, small status records).
Raw bytes or oversized payloads are rejected with :class:`PayloadTooLarge`.
"""

from __future__ import annotations

import heapq
import itertools
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .clocks import Clock, WallClock

PAYLOAD_LIMIT_BYTES = 4096


class QueueError(Exception):
    pass


class QueueClosed(QueueError):
    pass


class PayloadTooLarge(QueueError):
    pass


class LeaseExpired(QueueError):
    pass


class UnknownLease(QueueError):
    pass


@dataclass(frozen=True)
class QueueMessage:
    message_id: str
    payload: Any
    enqueued_at: float
    delivery_count: int


@dataclass(frozen=True)
class Lease:
    """A timed exclusive claim on one message."""

    lease_id: str
    message_id: str
    holder_id: str
    deadline: float
    delivery_count: int
    payload: Any


@dataclass(frozen=True)
class QueueDepth:
    visible: int
    in_flight: int


class _State(Enum):
    VISIBLE = "visible"
    LEASED = "leased"
    ACKED = "acked"
    DEAD = "dead"


@dataclass
class _Entry:
    seq: int
    message_id: str
    payload: Any
    enqueued_at: float
    delivery_count: int = 0
    state: _State = _State.VISIBLE
    lease_id: Optional[str] = None
    holder_id: Optional[str] = None
    deadline: float = 0.0


@dataclass
class QueueStats:
    enqueued: int = 0
    acked: int = 0
    deliveries: int = 0
    redeliveries: int = 0
    expirations: int = 0
    dead_lettered: int = 0
    peak_visible: int = 0


class MessageQueue:
    """Thread-safe FIFO queue with visibility-timeout leases.

    All operations are linearizable (single internal critical section).
    """

    def __init__(
        self,
        name: str = "queue",
        clock: Optional[Clock] = None,
        max_delivery: Optional[int] = None,
        payload_limit: int = PAYLOAD_LIMIT_BYTES,
    ) -> None:
        self.name = name
        self._clock = clock or WallClock()
        self._max_delivery = max_delivery
        self._payload_limit = payload_limit
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._entries: dict[str, _Entry] = {}
        self._visible: list[tuple[int, str]] = []  # heap of (seq, message_id)
        self._leases: dict[str, str] = {}  # lease_id -> message_id
        self._consumed: set[str] = set()  # lease ids retired by ack/nack
        self._dead: list[QueueMessage] = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self._closed = False
        self.stats = QueueStats()

    # -- helpers (caller holds the lock) ---------------------------------

    def _validate_payload(self, payload: Any) -> None:
        if isinstance(payload, (bytes, bytearray, memoryview)):
            raise PayloadTooLarge(
                f"{self.name}: queue messages carry references, not raw bytes"
            )
        try:
            encoded = json.dumps(payload, sort_keys=True, default=str)
        except (TypeError, ValueError) as exc:
            raise PayloadTooLarge(f"{self.name}: payload is not a serializable reference") from exc
        if len(encoded.encode("utf-8")) > self._payload_limit:
            raise PayloadTooLarge(
                f"{self.name}: payload exceeds {self._payload_limit} bytes"
            )

    def _expire_locked(self, now: float) -> int:
        expired = 0
        for entry in list(self._entries.values()):
            if entry.state is _State.LEASED and now > entry.deadline:
                self._leases.pop(entry.lease_id, None)
                entry.state = _State.VISIBLE
                entry.lease_id = None
                entry.holder_id = None
                heapq.heappush(self._visible, (entry.seq, entry.message_id))
                expired += 1
        if expired:
            self.stats.expirations += expired
            self._note_peak()
            self._cond.notify_all()
        return expired

    def _note_peak(self) -> None:
        visible = len(self._visible)
        if visible > self.stats.peak_visible:
            self.stats.peak_visible = visible

    def _next_deadline_locked(self) -> Optional[float]:
        deadlines = [
            e.deadline for e in self._entries.values() if e.state is _State.LEASED
        ]
        return min(deadlines) if deadlines else None

    def _resolve_lease(self, lease: Lease, now: float) -> _Entry:
        """Return the live entry for *lease*, or raise.

        A lease retired by a successful ack/nack is UnknownLease forever; a
        lease whose deadline passed is LeaseExpired (the message may already
        be re-leased elsewhere); anything else is foreign: UnknownLease.
        """
        if lease.lease_id in self._consumed:
            raise UnknownLease(f"{self.name}: lease {lease.lease_id} was already retired")
        message_id = self._leases.get(lease.lease_id)
        if message_id is None:
            if now > lease.deadline:
                raise LeaseExpired(
                    f"{self.name}: lease {lease.lease_id} expired at {lease.deadline:.3f}"
                )
            raise UnknownLease(f"{self.name}: lease {lease.lease_id} is not current")
        entry = self._entries[message_id]
        if now > entry.deadline:
            # Too late: return the message to the visible set, exactly as the
            # lazy sweep would, and report expiry to the caller.
            self._leases.pop(lease.lease_id, None)
            entry.state = _State.VISIBLE
            entry.lease_id = None
            entry.holder_id = None
            heapq.heappush(self._visible, (entry.seq, entry.message_id))
            self.stats.expirations += 1
            self._note_peak()
            self._cond.notify_all()
            raise LeaseExpired(
                f"{self.name}: lease {lease.lease_id} expired at {entry.deadline:.3f}"
            )
        return entry

    # -- operations --------------------------------------------------------

    def enqueue(self, payload: Any) -> str:
        with self._lock:
            if self._closed:
                raise QueueClosed(f"{self.name}: closed")
            self._validate_payload(payload)
            seq = next(self._seq)
            message_id = f"{self.name}-m{next(self._ids):08d}"
            entry = _Entry(
                seq=seq,
                message_id=message_id,
                payload=payload,
                enqueued_at=self._clock.now(),
            )
            self._entries[message_id] = entry
            heapq.heappush(self._visible, (seq, message_id))
            self.stats.enqueued += 1
            self._note_peak()
            self._cond.notify()
            return message_id

    def receive(
        self,
        holder_id: str,
        visibility_timeout: float,
        wait_timeout: float = 0.0,
    ) -> Optional[Lease]:
        """Lease the oldest visible message, or return None if there is none.

        ``wait_timeout`` > 0 blocks up to that many wall seconds for a message
        to become visible (only meaningful with a wall clock).
        """
        if visibility_timeout <= 0:
            raise ValueError("visibility_timeout must be > 0")
        wall_deadline = self._clock.now() + wait_timeout if wait_timeout > 0 else None
        with self._lock:
            while True:
                if self._closed:
                    return None
                now = self._clock.now()
                self._expire_locked(now)
                lease = self._try_lease_locked(holder_id, visibility_timeout, now)
                if lease is not None:
                    return lease
                if wall_deadline is None:
                    return None
                remaining = wall_deadline - self._clock.now()
                if remaining <= 0:
                    return None
                next_deadline = self._next_deadline_locked()
                if next_deadline is not None:
                    remaining = min(remaining, max(next_deadline - self._clock.now(), 0.001))
                self._cond.wait(timeout=remaining)

    def _try_lease_locked(
        self, holder_id: str, visibility_timeout: float, now: float
    ) -> Optional[Lease]:
        while self._visible:
            seq, message_id = heapq.heappop(self._visible)
            entry = self._entries.get(message_id)
            if entry is None or entry.state is not _State.VISIBLE or entry.seq != seq:
                continue  # stale heap slot
            if self._max_delivery is not None and entry.delivery_count + 1 > self._max_delivery:
                entry.state = _State.DEAD
                self._dead.append(
                    QueueMessage(
                        message_id=entry.message_id,
                        payload=entry.payload,
                        enqueued_at=entry.enqueued_at,
                        delivery_count=entry.delivery_count,
                    )
                )
                self.stats.dead_lettered += 1
                continue
            entry.delivery_count += 1
            entry.state = _State.LEASED
            entry.lease_id = f"{self.name}-l{next(self._ids):08d}"
            entry.holder_id = holder_id
            entry.deadline = now + visibility_timeout
            self._leases[entry.lease_id] = message_id
            self.stats.deliveries += 1
            if entry.delivery_count > 1:
                self.stats.redeliveries += 1
            return Lease(
                lease_id=entry.lease_id,
                message_id=message_id,
                holder_id=holder_id,
                deadline=entry.deadline,
                delivery_count=entry.delivery_count,
                payload=entry.payload,
            )
        return None

    def ack(self, lease: Lease) -> None:
        """Permanently remove the leased message."""
        with self._lock:
            now = self._clock.now()
            try:
                entry = self._resolve_lease(lease, now)
            finally:
                self._expire_locked(now)
            self._leases.pop(lease.lease_id, None)
            self._consumed.add(lease.lease_id)
            entry.state = _State.ACKED
            entry.lease_id = None
            entry.holder_id = None
            del self._entries[entry.message_id]
            self.stats.acked += 1

    def nack(self, lease: Lease) -> None:
        """Return the leased message to the visible set immediately."""
        with self._lock:
            now = self._clock.now()
            try:
                entry = self._resolve_lease(lease, now)
            finally:
                self._expire_locked(now)
            self._leases.pop(lease.lease_id, None)
            self._consumed.add(lease.lease_id)
            entry.state = _State.VISIBLE
            entry.lease_id = None
            entry.holder_id = None
            heapq.heappush(self._visible, (entry.seq, entry.message_id))
            self._note_peak()
            self._cond.notify()

    def depth(self) -> QueueDepth:
        with self._lock:
            self._expire_locked(self._clock.now())
            visible = sum(1 for e in self._entries.values() if e.state is _State.VISIBLE)
            in_flight = sum(1 for e in self._entries.values() if e.state is _State.LEASED)
            return QueueDepth(visible=visible, in_flight=in_flight)

    def sweep_expired(self) -> int:
        """Force expiry evaluation; returns the number of leases expired."""
        with self._lock:
            return self._expire_locked(self._clock.now())

    def drain_dead_letters(self) -> list[QueueMessage]:
        with self._lock:
            dead, self._dead = self._dead, []
            return dead

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._cond.notify_all()
