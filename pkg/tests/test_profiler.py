import csv
import json
import random

import pytest

from docflow.config import default_config
from docflow.profiler import (
    CSV_COLUMNS,
    EmptySamples,
    ExperimentError,
    ExperimentPlan,
    LevelAggregate,
    LevelMetrics,
    PlanResult,
    aggregate_level,
    analytic_ceiling,
    classify_bottleneck,
    default_label_distribution,
    emit_report,
    p_quantile,
    run_level,
    single_doc_profile,
)


class TestQuantile:
    def test_nearest_rank_1_to_100(self):
        samples = list(range(1, 101))
        assert p_quantile(samples, 0.95) == 95

    def test_single_sample(self):
        for q in (0.01, 0.5, 0.99):
            assert p_quantile([7], q) == 7

    def test_three_samples_median(self):
        assert p_quantile([5, 1, 3], 0.5) == 3  # sorted [1,3,5], index ceil(1.5)=2

    def test_empty_raises(self):
        with pytest.raises(EmptySamples):
            p_quantile([], 0.5)

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            p_quantile([1], 0.0)
        with pytest.raises(ValueError):
            p_quantile([1], 1.0)

    def test_against_brute_force_oracle(self):
        rng = random.Random(9)
        import math

        for _ in range(200):
            n = rng.randint(1, 50)
            samples = [rng.uniform(0, 100) for _ in range(n)]
            q = rng.uniform(0.01, 0.99)
            expected = sorted(samples)[math.ceil(q * n) - 1]
            assert p_quantile(samples, q) == expected


def _metrics(**overrides) -> LevelMetrics:
    base = dict(
        level=5,
        seed=1,
        docs=10,
        completed=10,
        failed=0,
        wall_window=100.0,
        throughput=0.1,
        steady_throughput=0.1,
        p50=18.0,
        p95=22.0,
        p99=24.0,
        mean_latency=18.0,
        step_means={},
        step_shares={},
        share_of_wall=0.99,
        peak_queue_depth=5,
        gpu_queue_wait_per_doc=0.0,
        api_queue_wait_per_doc=0.0,
        gpu_wait_ratio=0.0,
        api_wait_ratio=0.0,
        gpu_util=0.5,
        api_util=0.1,
        worker_busy=0.99,
        retries=0,
        duplicate_deliveries=0,
        duplicate_completions=0,
        dead_letters=0,
        cost_per_doc=0.038,
        api_cost_per_doc=0.033,
        parse_cost_share=0.79,
    )
    base.update(overrides)
    return LevelMetrics(**base)


class TestBottleneckClassifier:
    def test_low_concurrency_idle_gpu_is_workers(self):
        m = _metrics(gpu_util=0.3, gpu_wait_ratio=0.01, worker_busy=0.99)
        assert classify_bottleneck(m) == "workers"

    def test_saturated_gpu_with_dominant_wait_is_inference(self):
        m = _metrics(gpu_util=0.98, gpu_wait_ratio=1.5, worker_busy=1.0)
        assert classify_bottleneck(m) == "inference"

    def test_tiny_api_limit_is_downstream(self):
        m = _metrics(api_util=0.99, api_wait_ratio=2.0, gpu_util=0.8, gpu_wait_ratio=0.3)
        assert classify_bottleneck(m) == "downstream"

    def test_no_dominant_tier_is_ambiguous(self):
        m = _metrics(gpu_util=0.9, gpu_wait_ratio=0.5, worker_busy=0.5)
        assert classify_bottleneck(m) == "ambiguous"


class TestReports:
    def _result(self):
        rows = [aggregate_level([_metrics(level=lv, seed=s) for s in (1, 2)]) for lv in (1, 5, 10)]
        return PlanResult(plan_summary={"docs": 10}, ceiling=0.29, c_sat=5.1, rows=rows)

    def test_csv_has_header_and_rows(self, tmp_path):
        paths = emit_report(self._result(), tmp_path)
        with open(paths["csv"]) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 4
        assert [r[0] for r in rows[1:]] == ["1", "5", "10"]

    def test_json_mirror_is_canonical(self, tmp_path):
        paths = emit_report(self._result(), tmp_path)
        body = json.loads(paths["json"].read_text())
        assert body["c_sat"] == 5.1
        assert len(body["rows"]) == 3
        # rerun writes byte-identical JSON for identical inputs
        first = paths["json"].read_bytes()
        emit_report(self._result(), tmp_path)
        assert paths["json"].read_bytes() == first

    def test_empty_report_rejected(self, tmp_path):
        with pytest.raises(ExperimentError):
            emit_report(PlanResult(plan_summary={}, ceiling=0, c_sat=0), tmp_path)


class TestPlanHelpers:
    def test_default_labels_share_step_list(self):
        config = default_config()
        labels = default_label_distribution(config)
        assert set(labels) == {"invoice", "claim_form", "correspondence"}
        assert sum(labels.values()) == pytest.approx(1.0)

    def test_analytic_ceiling_matches_hand_computation(self):
        plan = ExperimentPlan(config=default_config(), gpu_slots=4, pages=8)
        ceiling, c_sat = analytic_ceiling(plan)
        assert ceiling == pytest.approx(4 / 13.6)
        assert c_sat == pytest.approx((4 / 13.6) * 17.5)


class TestSmallRuns:
    def test_run_level_completes_corpus(self):
        plan = ExperimentPlan(
            config=default_config(), docs=6, pages=4, levels=(3,), seeds=(2,), time_scale=0.01
        )
        metrics = run_level(plan, level=3, seed=2)
        assert metrics.completed == 6
        assert metrics.failed == 0
        assert metrics.duplicate_completions == 0
        assert metrics.throughput > 0
        assert metrics.p95 >= metrics.p50

    def test_serial_level_throughput_matches_mean_wall(self):
        plan = ExperimentPlan(
            config=default_config(), docs=4, pages=4, levels=(1,), seeds=(3,), time_scale=0.01
        )
        metrics = run_level(plan, level=1, seed=3)
        assert metrics.throughput * metrics.mean_latency == pytest.approx(1.0, rel=0.15)

    def test_single_doc_profile_shape(self):
        profile = single_doc_profile(seed=5, time_scale=0.01)
        assert set(profile["shares"]) == {"classify", "ocr", "stitch", "parse"}
        assert sum(profile["shares"].values()) == pytest.approx(1.0)
        assert profile["shares"]["ocr"] > 0.5
