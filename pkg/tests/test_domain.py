import pytest
from hypothesis import given, strategies as st

from docflow import domain
from docflow.domain import (
    COMPLETED,
    QUEUED,
    SUBMITTED,
    Document,
    DocumentStatus,
    EventKind,
    InvalidTransition,
    PageRef,
    StatusEvent,
    StatusKind,
    failed,
    processing,
    transition,
)


def test_queued_pulled_enters_first_step():
    out = transition(QUEUED, domain.worker_pulled("classify", attempt=1))
    assert out == processing("classify")


def test_processing_last_step_completes():
    out = transition(processing("parse"), domain.all_steps_completed(attempt=1))
    assert out == COMPLETED


def test_terminal_rejects_events():
    with pytest.raises(InvalidTransition):
        transition(COMPLETED, domain.worker_pulled("classify", attempt=2))
    with pytest.raises(InvalidTransition):
        transition(failed("x"), domain.validated())


def test_step_completed_advances_to_next_step():
    out = transition(processing("ocr"), domain.step_completed("ocr", "stitch", attempt=1))
    assert out == processing("stitch")


def test_step_completed_requires_matching_step():
    with pytest.raises(InvalidTransition):
        transition(processing("ocr"), domain.step_completed("classify", "ocr", attempt=1))


def test_stale_is_not_terminal():
    stale = transition(processing("ocr"), domain.stale_detected(attempt=1))
    assert stale.kind is StatusKind.STALE
    assert transition(stale, domain.redelivered(attempt=2)) == QUEUED
    assert transition(stale, domain.all_steps_completed(attempt=1)) == COMPLETED


def test_submitted_paths():
    assert transition(SUBMITTED, domain.validated()) == QUEUED
    out = transition(SUBMITTED, domain.step_failed("ingest", "disk full"))
    assert out.kind is StatusKind.FAILED and out.reason == "disk full"


_statuses = st.sampled_from(
    [
        SUBMITTED,
        QUEUED,
        processing("classify"),
        processing("ocr"),
        processing("parse"),
        COMPLETED,
        failed("x"),
        domain.STALE,
    ]
)

_events = st.builds(
    StatusEvent,
    kind=st.sampled_from(list(EventKind)),
    step=st.sampled_from([None, "classify", "ocr", "stitch", "parse"]),
    next_step=st.sampled_from([None, "ocr", "stitch", "parse"]),
    reason=st.sampled_from([None, "boom"]),
    attempt=st.integers(min_value=0, max_value=3),
)


@given(_statuses, _events)
def test_transition_is_deterministic(status, event):
    def attempt():
        try:
            return transition(status, event)
        except InvalidTransition:
            return "invalid"

    assert attempt() == attempt()


@given(st.lists(_events, max_size=30))
def test_completed_requires_all_steps_completed_exactly_once(events):
    status = SUBMITTED
    applied_all_steps = 0
    for event in events:
        try:
            status = transition(status, event)
        except InvalidTransition:
            continue
        if event.kind is EventKind.ALL_STEPS_COMPLETED:
            applied_all_steps += 1
    if status == COMPLETED:
        assert applied_all_steps == 1


def test_document_pages_contiguous():
    with pytest.raises(ValueError):
        Document(
            id="d",
            pages=(PageRef("d", 1, "pages/d/1"),),
            doc_type="invoice",
            submitted_at=0.0,
        )
    with pytest.raises(ValueError):
        Document(id="d", pages=(), doc_type="invoice", submitted_at=0.0)


def test_status_round_trip():
    for status in (SUBMITTED, processing("ocr"), failed("nope"), COMPLETED):
        assert DocumentStatus.from_dict(status.to_dict()) == status
