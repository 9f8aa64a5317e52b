import pytest

from docflow import domain
from docflow.clocks import ManualClock
from docflow.domain import StaleWriter, InvalidTransition, StatusKind
from docflow.store import (
    BlobStore,
    HashMismatch,
    NotFound,
    TrackingStore,
    UnknownStep,
)

STEPS = ("classify", "ocr", "stitch", "parse")


@pytest.fixture
def blobs(tmp_path):
    return BlobStore(tmp_path)


@pytest.fixture
def clock():
    return ManualClock(start=100.0)


@pytest.fixture
def tracking(tmp_path, blobs, clock):
    return TrackingStore(tmp_path, blobs, clock=clock)


def make_doc(tracking, doc_id="doc-1"):
    tracking.create_record(doc_id, "invoice", STEPS, pages=8)
    return doc_id


class TestBlobStore:
    def test_round_trip_with_hash(self, blobs):
        blobs.put_blob("pages/doc-1/0", b"hello world")
        blob = blobs.get_blob("pages/doc-1/0")
        assert blob.data == b"hello world"
        assert blob.length == 11
        assert len(blob.hash) == 16

    def test_get_unknown_is_not_found(self, blobs):
        with pytest.raises(NotFound):
            blobs.get_blob("nope")

    def test_put_idempotent(self, blobs):
        blobs.put_blob("k", b"abc")
        blobs.put_blob("k", b"abc")
        assert blobs.get_blob("k").data == b"abc"

    def test_corruption_detected(self, blobs, tmp_path):
        blobs.put_blob("k", b"abc")
        path, _ = blobs._paths("k")
        path.write_bytes(b"abx")
        with pytest.raises(HashMismatch):
            blobs.get_blob("k")


class TestTrackingStore:
    def test_update_status_applies_transition(self, tracking):
        doc = make_doc(tracking)
        tracking.update_status(doc, domain.validated())
        record = tracking.update_status(doc, domain.worker_pulled("classify", 1))
        assert record.status.kind is StatusKind.PROCESSING
        assert record.status.step == "classify"
        assert record.delivery_count == 1

    def test_idempotent_repeat_is_noop(self, tracking):
        doc = make_doc(tracking)
        tracking.update_status(doc, domain.validated())
        first = tracking.update_status(doc, domain.worker_pulled("classify", 1))
        second = tracking.update_status(doc, domain.worker_pulled("classify", 1))
        assert second.status == first.status
        assert second.updated_at == first.updated_at

    def test_step_completed_sets_finished_at(self, tracking):
        doc = make_doc(tracking)
        tracking.update_status(doc, domain.validated())
        tracking.update_status(doc, domain.worker_pulled("ocr", 1))
        tracking.record_step_start(doc, "ocr", 1)
        record = tracking.update_status(doc, domain.step_completed("ocr", "stitch", 1))
        timing = record.timing_for("ocr", 1)
        assert timing.finished_at is not None
        assert timing.started_at <= timing.finished_at

    def test_update_missing_is_not_found(self, tracking):
        with pytest.raises(NotFound):
            tracking.update_status("ghost", domain.validated())

    def test_invalid_transition_propagates(self, tracking):
        doc = make_doc(tracking)
        with pytest.raises(InvalidTransition):
            tracking.update_status(doc, domain.worker_pulled("classify", 1))

    def test_stale_attempt_is_fenced(self, tracking):
        doc = make_doc(tracking)
        tracking.update_status(doc, domain.validated())
        tracking.update_status(doc, domain.worker_pulled("classify", 2))
        with pytest.raises(StaleWriter):
            tracking.update_status(doc, domain.step_completed("classify", "ocr", 1))

    def test_mark_inference_started_first_wins(self, tracking, clock):
        doc = make_doc(tracking)
        first = tracking.mark_inference_started(doc)
        clock.advance(50)
        second = tracking.mark_inference_started(doc)
        assert first == second == tracking.get(doc).processing_start_time

    def test_status_monotone_updated_at(self, tracking, clock):
        doc = make_doc(tracking)
        t0 = tracking.get(doc).updated_at
        clock.advance(5)
        tracking.update_status(doc, domain.validated())
        assert tracking.get(doc).updated_at >= t0

    def test_reload_and_compaction(self, tmp_path, blobs, clock):
        store1 = TrackingStore(tmp_path, blobs, clock=clock)
        store1.create_record("doc-1", "invoice", STEPS, pages=8)
        store1.update_status("doc-1", domain.validated())
        store1.update_status("doc-1", domain.worker_pulled("classify", 1))
        store2 = TrackingStore(tmp_path, blobs, clock=clock)
        record = store2.get("doc-1")
        assert record.status.kind is StatusKind.PROCESSING
        assert record.pages == 8
        log = (tmp_path / "tracking" / "records.log").read_text().strip().splitlines()
        assert len(log) == 1  # compacted to one line per document


class TestCheckpoints:
    def test_latest_follows_pipeline_order(self, tracking):
        doc = make_doc(tracking)
        tracking.save_checkpoint(doc, "classify", b"c1", attempt=1)
        tracking.save_checkpoint(doc, "ocr", b"o1", attempt=1)
        step, payload = tracking.latest_checkpoint(doc)
        assert (step, payload) == ("ocr", b"o1")

    def test_no_checkpoints_returns_none(self, tracking):
        doc = make_doc(tracking)
        assert tracking.latest_checkpoint(doc) is None

    def test_save_same_attempt_twice_idempotent(self, tracking):
        doc = make_doc(tracking)
        cp1 = tracking.save_checkpoint(doc, "classify", b"x", attempt=1)
        cp2 = tracking.save_checkpoint(doc, "classify", b"x", attempt=1)
        assert cp1.payload_key == cp2.payload_key
        assert tracking.latest_checkpoint(doc)[1] == b"x"

    def test_later_attempt_supersedes(self, tracking):
        doc = make_doc(tracking)
        tracking.save_checkpoint(doc, "classify", b"a1", attempt=1)
        tracking.save_checkpoint(doc, "classify", b"a2", attempt=2)
        assert tracking.get(doc).checkpoints["classify"].attempt == 2

    def test_unknown_step_rejected(self, tracking):
        doc = make_doc(tracking)
        with pytest.raises(UnknownStep):
            tracking.save_checkpoint(doc, "metadata", b"m", attempt=1)

    def test_gap_in_prefix_stops_latest(self, tracking):
        doc = make_doc(tracking)
        tracking.save_checkpoint(doc, "classify", b"c", attempt=1)
        tracking.save_checkpoint(doc, "stitch", b"s", attempt=1)  # ocr missing
        step, _ = tracking.latest_checkpoint(doc)
        assert step == "classify"
        assert set(tracking.checkpointed_outputs(doc)) == {"classify"}
