import math
import statistics

import pytest

from docflow.config import ConfigError
from docflow.worldgen import (
    ANCHOR_WORDS,
    EmptyInput,
    PagePayload,
    PagesDistribution,
    corpus_manifest,
    default_calibration,
    expected_hybrid_cost_per_page,
    generate_corpus,
    parse_page_payload,
    run_calibration,
    sample_classifier_outcome,
    sample_latency,
    sample_ocr_result,
    sample_parse_outcome,
    substream,
    table1_calibration,
    token_counts,
)

FIELDS = {"invoice": ["total", "vendor"], "claim_form": ["claim_id"], "correspondence": ["sender"]}
LABELS = sorted(FIELDS)


def page(difficulty="easy", label="invoice", doc="doc-1", index=0, words=("a", "b")):
    return PagePayload(
        document_id=doc,
        page_index=index,
        true_label=label,
        difficulty=difficulty,
        words=tuple(words),
        fields={"total": "x", "vendor": "y"},
        is_cover=index == 0,
        metadata={},
    )


class TestCorpus:
    def test_deterministic_for_fixed_seed(self):
        a = generate_corpus(20, PagesDistribution.fixed(8), {"invoice": 1.0}, 42, FIELDS)
        b = generate_corpus(20, PagesDistribution.fixed(8), {"invoice": 1.0}, 42, FIELDS)
        assert [g.document.id for g in a] == [g.document.id for g in b]
        assert a[3].pages[5].true_text == b[3].pages[5].true_text
        assert a[3].pages[5].payload() == b[3].pages[5].payload()

    def test_fixed_page_count(self):
        corpus = generate_corpus(10, PagesDistribution.fixed(8), {"invoice": 1.0}, 1, FIELDS)
        assert all(len(g.pages) == 8 for g in corpus)

    def test_degenerate_single_page(self):
        corpus = generate_corpus(5, PagesDistribution.fixed(1), {"invoice": 1.0}, 1, FIELDS)
        assert all(len(g.pages) == 1 for g in corpus)

    def test_empirical_mean_page_count_within_2pct(self):
        dist = PagesDistribution.uniform(4, 12)
        corpus = generate_corpus(10_000, dist, {"invoice": 1.0}, 7, FIELDS)
        mean = statistics.fmean(len(g.pages) for g in corpus)
        assert abs(mean - dist.mean()) / dist.mean() < 0.02

    def test_invalid_distributions(self):
        with pytest.raises(ConfigError):
            generate_corpus(0, PagesDistribution.fixed(8), {"invoice": 1.0}, 1, FIELDS)
        with pytest.raises(ConfigError):
            generate_corpus(1, PagesDistribution.fixed(8), {"invoice": -1.0}, 1, FIELDS)
        with pytest.raises(ConfigError):
            generate_corpus(1, PagesDistribution.fixed(8), {"mystery": 1.0}, 1, FIELDS)
        with pytest.raises(ConfigError):
            PagesDistribution.fixed(0)

    def test_payload_round_trip(self):
        corpus = generate_corpus(1, PagesDistribution.fixed(2), {"invoice": 1.0}, 3, FIELDS)
        page_obj = corpus[0].pages[1]
        parsed = parse_page_payload(page_obj.payload())
        assert parsed.document_id == page_obj.ref.document_id
        assert parsed.words == page_obj.true_text
        assert parsed.difficulty == page_obj.difficulty

    def test_manifest_one_line_per_doc(self):
        corpus = generate_corpus(4, PagesDistribution.fixed(2), {"invoice": 1.0}, 3, FIELDS)
        lines = corpus_manifest(corpus, 3).strip().splitlines()
        assert len(lines) == 4


class TestClassifier:
    def test_easy_pages_always_above_threshold(self):
        cal = default_calibration()
        for i in range(2_000):
            out = sample_classifier_outcome(page("easy", index=i % 8, doc=f"d{i}"), "clip", 5, LABELS, cal)
            assert out.confidence >= 0.7

    def test_hard_pages_always_below_threshold(self):
        cal = default_calibration()
        for i in range(500):
            out = sample_classifier_outcome(page("hard", index=i % 8, doc=f"d{i}"), "clip", 5, LABELS, cal)
            assert out.confidence < 0.7

    def test_two_point_confidences(self):
        cal = default_calibration()
        assert sample_classifier_outcome(page("easy"), "clip", 1, LABELS, cal).confidence == 0.9
        assert sample_classifier_outcome(page("hard"), "clip", 1, LABELS, cal).confidence == 0.5

    def test_beta_model_respects_bands(self):
        cal = default_calibration(confidence_model="beta")
        for i in range(500):
            easy = sample_classifier_outcome(page("easy", doc=f"e{i}"), "clip", 9, LABELS, cal)
            hard = sample_classifier_outcome(page("hard", doc=f"h{i}"), "clip", 9, LABELS, cal)
            assert easy.confidence > 0.7
            assert hard.confidence < 0.7

    def test_vlm_reports_full_confidence(self):
        cal = default_calibration()
        out = sample_classifier_outcome(page("hard"), "vlm_classify", 1, LABELS, cal)
        assert out.confidence == 1.0

    def test_deterministic(self):
        cal = default_calibration()
        a = sample_classifier_outcome(page(), "clip", 123, LABELS, cal)
        b = sample_classifier_outcome(page(), "clip", 123, LABELS, cal)
        assert a == b

    def test_fallback_rate_matches_target(self):
        corpus = generate_corpus(1_250, PagesDistribution.fixed(8), {"invoice": 1.0}, 11, FIELDS)
        pages = [p for g in corpus for p in g.pages]
        hard = sum(1 for p in pages if p.difficulty == "hard")
        assert abs(hard / len(pages) - 0.04) <= 0.01

    def test_calibration_table_reproduction_small(self):
        report = run_calibration(seeds=(1, 2), pages_per_seed=5_000, labels=LABELS)
        assert abs(report.clip_accuracy - 0.92) <= 0.01
        assert abs(report.vlm_accuracy - 0.98) <= 0.01
        assert abs(report.hybrid_accuracy - 0.96) <= 0.01
        assert abs(report.fallback_rate - 0.04) <= 0.01

    def test_expected_hybrid_cost(self):
        assert expected_hybrid_cost_per_page(default_calibration()) == pytest.approx(0.0004)


class TestLatency:
    def test_ocr_draw_within_profile_range(self):
        cal = default_calibration()
        ocr = cal.profile("ocr")
        for i in range(1_000):
            d = sample_latency("ocr", ocr, 3, 1.0, f"doc-{i}", 0)
            assert 1.0 <= d <= 2.0

    def test_time_scale_is_linear(self):
        cal = default_calibration()
        ocr = cal.profile("ocr")
        full = sample_latency("ocr", ocr, 3, 1.0, "doc-1", 0)
        scaled = sample_latency("ocr", ocr, 3, 0.01, "doc-1", 0)
        assert scaled == pytest.approx(full * 0.01)
        assert 0.010 <= scaled <= 0.020

    def test_empirical_mean_of_ocr_draws(self):
        cal = default_calibration()
        ocr = cal.profile("ocr")
        draws = [sample_latency("ocr", ocr, 3, 1.0, f"doc-{i}", i % 8) for i in range(10_000)]
        assert statistics.fmean(draws) == pytest.approx(1.5, abs=0.02)

    def test_table1_profile_keeps_nominal_clip_range(self):
        assert table1_calibration().profile("clip").latency == (0.5, 1.0)
        assert default_calibration().profile("vlm_classify").latency == (2.0, 3.0)

    def test_invalid_time_scale(self):
        with pytest.raises(ValueError):
            sample_latency("ocr", default_calibration().profile("ocr"), 1, 0.0, "d", 0)


class TestParse:
    def test_anchor_document(self):
        words = ["w"] * ANCHOR_WORDS
        out = sample_parse_outcome("doc-1", words, ["total"], {"total": "42"},
                                   default_calibration().profile("parse"), 1)
        assert out.input_tokens == 4500
        assert out.output_tokens == 400
        assert out.cost == pytest.approx(0.03)

    def test_one_eighth_document(self):
        assert token_counts(ANCHOR_WORDS // 8)[0] == 562

    def test_empty_text_raises(self):
        with pytest.raises(EmptyInput):
            sample_parse_outcome("doc-1", [], ["total"], {},
                                 default_calibration().profile("parse"), 1)

    def test_fields_match_truth_at_full_accuracy(self):
        profile = default_calibration().profile("parse")
        profile = profile.__class__("parse", profile.latency, 1.0, profile.unit_cost)
        out = sample_parse_outcome("doc-1", ["w"] * 10, ["total", "vendor"],
                                   {"total": "42", "vendor": "acme"}, profile, 1)
        assert out.fields == {"total": "42", "vendor": "acme"}

    def test_zero_accuracy_perturbs_one_field(self):
        profile = default_calibration().profile("parse")
        profile = profile.__class__("parse", profile.latency, 0.0, profile.unit_cost)
        out = sample_parse_outcome("doc-1", ["w"] * 10, ["total", "vendor"],
                                   {"total": "42", "vendor": "acme"}, profile, 1)
        wrong = [k for k, v in out.fields.items() if v not in ("42", "acme")]
        assert len(wrong) == 1

    def test_retry_index_changes_draw_but_is_stable(self):
        profile = default_calibration().profile("parse")
        a1 = sample_parse_outcome("d", ["w"] * 10, ["total"], {"total": "1"}, profile, 1, 1)
        a2 = sample_parse_outcome("d", ["w"] * 10, ["total"], {"total": "1"}, profile, 1, 1)
        assert a1 == a2


class TestOcrWords:
    def test_order_and_count_preserved(self):
        words = [f"w{i}" for i in range(120)]
        result = sample_ocr_result(page(words=words), 5)
        assert [w.text for w in result] == words

    def test_confidences_in_unit_interval(self):
        result = sample_ocr_result(page(words=["a"] * 30), 5)
        assert all(0.0 <= w.confidence <= 1.0 for w in result)

    def test_repeat_identical(self):
        assert sample_ocr_result(page(), 5) == sample_ocr_result(page(), 5)

    def test_boxes_normalized(self):
        for w in sample_ocr_result(page(words=["x"] * 40), 5):
            x0, y0, x1, y1 = w.box
            assert 0 <= x0 < x1 <= 1.0001
            assert 0 <= y0 < y1 <= 1.0001


def test_substream_independence():
    a = substream(1, "doc", 0, "ocr").random()
    b = substream(1, "doc", 1, "ocr").random()
    c = substream(2, "doc", 0, "ocr").random()
    assert len({a, b, c}) == 3
