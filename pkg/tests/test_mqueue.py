import pytest

from docflow.clocks import ManualClock
from docflow.mqueue import (
    LeaseExpired,
    MessageQueue,
    PayloadTooLarge,
    QueueClosed,
    UnknownLease,
)

from _queue_model import run_many


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def queue(clock):
    return MessageQueue("q", clock=clock)


def test_enqueue_increases_depth(queue):
    queue.enqueue("doc-1")
    assert queue.depth().visible == 1


def test_fifo_order(queue):
    queue.enqueue("a")
    queue.enqueue("b")
    assert queue.receive("w", 30).payload == "a"
    assert queue.receive("w", 30).payload == "b"


def test_image_bytes_rejected(queue):
    with pytest.raises(PayloadTooLarge):
        queue.enqueue(b"\x89PNG fake image bytes")
    with pytest.raises(PayloadTooLarge):
        queue.enqueue({"payload": "x" * 10_000})


def test_receive_empty_returns_none(queue):
    assert queue.receive("w", 30) is None


def test_lease_deadline_and_delivery_count(queue, clock):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 300)
    assert lease.deadline == clock.now() + 300
    assert lease.delivery_count == 1


def test_redelivery_after_expiry(queue, clock):
    queue.enqueue("doc-1")
    first = queue.receive("w1", 30)
    assert first is not None
    assert queue.receive("w2", 30) is None  # hidden while leased
    clock.advance(30.001)
    second = queue.receive("w2", 30)
    assert second is not None
    assert second.payload == "doc-1"
    assert second.delivery_count == 2


def test_ack_removes_permanently(queue, clock):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 30)
    queue.ack(lease)
    assert queue.depth() == queue.depth().__class__(0, 0)
    clock.advance(1000)
    assert queue.receive("w", 30) is None


def test_ack_after_deadline_is_lease_expired(queue, clock):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 30)
    clock.advance(30.001)
    with pytest.raises(LeaseExpired):
        queue.ack(lease)


def test_foreign_lease_is_unknown(queue):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 30)
    forged = lease.__class__("nope", lease.message_id, "w", lease.deadline, 1, "doc-1")
    with pytest.raises(UnknownLease):
        queue.ack(forged)


def test_nack_returns_message_with_preserved_count(queue):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 30)
    queue.nack(lease)
    again = queue.receive("w", 30)
    assert again.payload == "doc-1"
    assert again.delivery_count == 2


def test_nack_then_ack_same_lease_is_unknown(queue):
    queue.enqueue("doc-1")
    lease = queue.receive("w", 30)
    queue.nack(lease)
    with pytest.raises(UnknownLease):
        queue.ack(lease)


def test_depth_counts(queue, clock):
    for i in range(3):
        queue.enqueue(f"doc-{i}")
    queue.receive("w", 30)
    depth = queue.depth()
    assert (depth.visible, depth.in_flight) == (2, 1)
    clock.advance(31)
    depth = queue.depth()
    assert (depth.visible, depth.in_flight) == (3, 0)


def test_closed_queue_rejects_enqueue(queue):
    queue.close()
    with pytest.raises(QueueClosed):
        queue.enqueue("doc-1")


def test_backpressure_visible_monotone_without_receivers(queue):
    depths = []
    for i in range(10):
        queue.enqueue(f"doc-{i}")
        depths.append(queue.depth().visible)
    assert depths == sorted(depths)
    assert queue.stats.peak_visible == 10


def test_dead_letter_after_max_delivery(clock):
    queue = MessageQueue("q", clock=clock, max_delivery=2)
    queue.enqueue("doc-1")
    for _ in range(2):
        lease = queue.receive("w", 10)
        assert lease is not None
        clock.advance(11)
    assert queue.receive("w", 10) is None
    dead = queue.drain_dead_letters()
    assert [m.payload for m in dead] == ["doc-1"]
    assert queue.depth().visible == 0


def test_redelivered_message_keeps_fifo_position(queue, clock):
    queue.enqueue("a")
    queue.enqueue("b")
    lease = queue.receive("w", 10)  # leases "a"
    assert lease.payload == "a"
    clock.advance(11)  # "a" expires, returns to the front
    assert queue.receive("w", 10).payload == "a"
    assert queue.receive("w", 10).payload == "b"


def test_randomized_model_check_small():
    violations = run_many(cases=300, base_seed=1234)
    assert violations == []


def test_blocking_receive_wakes_on_enqueue():
    import threading
    import time

    queue = MessageQueue("q")  # wall clock
    result = {}

    def receiver():
        result["lease"] = queue.receive("w", 30, wait_timeout=5.0)

    thread = threading.Thread(target=receiver)
    thread.start()
    time.sleep(0.05)
    queue.enqueue("doc-1")
    thread.join(timeout=5)
    assert result["lease"] is not None and result["lease"].payload == "doc-1"
