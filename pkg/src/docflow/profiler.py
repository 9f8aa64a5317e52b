"""Batch experiment driver and metrics engine.

Runs concurrency sweeps over the full system (gateway -> queue -> pods ->
inference), computes throughput / latency percentiles / queue depths / cost
attribution from the worker event log and inference stats, classifies the
active bottleneck tier, and emits CSV + JSON reports.

Experiments execute on the real clock with all simulated latencies multiplied
by ``time_scale`` (default 0.01: 10 ms of wall time per modeled second), so
the true concurrency machinery is exercised; duration-valued metrics are
reported in modeled (pre-scale) seconds.

Cost attribution: the raw ledger carries actual per-call costs (the VLM
fallback is billed only when invoked), while the headline per-document cost
charges classification at the flat hybrid page rate of $0.001, which is how
the selective-fallback strategy is priced in capacity planning. Both numbers
appear in every report.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import PipelineConfig, default_config
from .events import EventLog
from .runtime import QuiescenceTimeout, System, build_system
from .store import canonical_json
from .worldgen import (
    HYBRID_BILLED_RATE_PER_PAGE,
    PagesDistribution,
    corpus_manifest,
    expected_doc_seconds,
    expected_gpu_seconds_per_doc,
    generate_corpus,
)

logger = logging.getLogger(__name__)

# Bottleneck tier thresholds (documented constants).
UTIL_SATURATED = 0.95
WAIT_DOMINANT_RATIO = 0.15
WORKER_BUSY_MIN = 0.85

TIER_WORKERS = "workers"
TIER_INFERENCE = "inference"
TIER_DOWNSTREAM = "downstream"
TIER_AMBIGUOUS = "ambiguous"

CSV_COLUMNS = (
    "level",
    "throughput",
    "p50",
    "p95",
    "p99",
    "peak_queue_depth",
    "gpu_util",
    "retries",
    "duplicates",
    "cost_per_doc",
    "bottleneck",
)


class EmptySamples(Exception):
    pass


class ExperimentError(Exception):
    def __init__(self, message: str, partial: Optional["PlanResult"] = None) -> None:
        super().__init__(message)
        self.partial = partial


def p_quantile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the value at 1-based index ceil(q*n) of the
    sorted samples."""
    if not samples:
        raise EmptySamples("quantile of an empty sample list")
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    ordered = sorted(samples)
    rank = math.ceil(q * len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class ExperimentPlan:
    config: PipelineConfig
    docs: int = 300
    pages: int = 8
    levels: tuple[int, ...] = (1, 2, 5, 10, 25, 50)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    time_scale: float = 0.01
    gpu_slots: Optional[int] = None
    api_concurrency: Optional[int] = None
    label_distribution: Optional[dict[str, float]] = None
    quiescence_timeout: float = 240.0

    def resolved_gpu_slots(self) -> int:
        return self.gpu_slots if self.gpu_slots is not None else self.config.gpu_slots

    def resolved_api_concurrency(self) -> int:
        return (
            self.api_concurrency
            if self.api_concurrency is not None
            else self.config.api_concurrency
        )

    def resolved_labels(self) -> dict[str, float]:
        if self.label_distribution is not None:
            return dict(self.label_distribution)
        return default_label_distribution(self.config)


def default_label_distribution(config: PipelineConfig) -> dict[str, float]:
    """Uniform over the doc types that share the default type's step list."""
    base_steps = config.steps_for(config.default_doc_type)
    names = [n for n in config.doc_types if config.steps_for(n) == base_steps]
    if not names:
        names = [config.default_doc_type]
    weight = 1.0 / len(names)
    return {n: weight for n in names}


@dataclass
class LevelMetrics:
    """One (level, seed) run's measurements. Durations in modeled seconds."""

    level: int
    seed: int
    docs: int
    completed: int
    failed: int
    wall_window: float
    throughput: float  # docs per modeled second
    steady_throughput: float  # same, measured over the steady-state window
    p50: float
    p95: float
    p99: float
    mean_latency: float
    step_means: dict[str, float]
    step_shares: dict[str, float]
    share_of_wall: float
    peak_queue_depth: int
    gpu_queue_wait_per_doc: float
    api_queue_wait_per_doc: float
    gpu_wait_ratio: float
    api_wait_ratio: float
    gpu_util: float
    api_util: float
    worker_busy: float
    retries: int
    duplicate_deliveries: int
    duplicate_completions: int
    dead_letters: int
    cost_per_doc: float  # billed accounting (hybrid page rate)
    api_cost_per_doc: float  # actual ledger accounting
    parse_cost_share: float
    bottleneck: str = TIER_AMBIGUOUS

    def to_dict(self) -> dict:
        return {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.__dict__.items()}


def compute_level_metrics(
    system: System,
    level: int,
    seed: int,
    document_ids: Sequence[str],
    window_start: float,
) -> LevelMetrics:
    """Distill one run's event log + inference stats into a metrics row."""
    events = system.event_log.records()
    scale = system.time_scale

    completions = [e for e in events if e.kind == "doc_completed"]
    latencies = sorted(e.data["wall_duration"] / scale for e in completions)
    window_end = max((e.t for e in completions), default=window_start)
    wall_window = max(window_end - window_start, 1e-9)

    step_durations: dict[str, list[float]] = {}
    for e in events:
        if e.kind == "step_finish":
            step_durations.setdefault(e.step, []).append(e.data["wall_duration"] / scale)
    step_means = {s: statistics.fmean(v) for s, v in step_durations.items()}
    step_total = sum(step_means.values())
    step_shares = (
        {s: m / step_total for s, m in step_means.items()} if step_total > 0 else {}
    )
    mean_latency = statistics.fmean(latencies) if latencies else 0.0
    share_of_wall = step_total / mean_latency if mean_latency else 0.0

    stats = system.inference.service_stats()
    completed = len(completions)
    gpu_wait_per_doc = stats.gpu_queue_wait_total / scale / max(completed, 1)
    api_wait_per_doc = stats.api_queue_wait_total / scale / max(completed, 1)
    gpu_wait_ratio = stats.gpu_queue_wait_total / max(stats.gpu_service_total, 1e-9)
    api_wait_ratio = stats.api_queue_wait_total / max(stats.api_service_total, 1e-9)

    # Utilization and busy fractions over the steady-state window (between
    # the 20th and 90th percentile completion times), so batch ramp-up and
    # drain tails do not dilute the saturation signal.
    completion_times = sorted(e.t for e in completions)
    if len(completion_times) >= 10:
        w_lo = completion_times[int(0.20 * (len(completion_times) - 1))]
        w_hi = completion_times[int(0.90 * (len(completion_times) - 1))]
    else:
        w_lo, w_hi = window_start, window_end
    span = max(w_hi - w_lo, 1e-9)

    def window_overlap(lo: float, hi: float) -> float:
        return max(0.0, min(hi, w_hi) - max(lo, w_lo))

    def class_busy(cls: str) -> float:
        from .inference import OP_CLASS

        return sum(
            window_overlap(s, f)
            for op, body in stats.per_op.items()
            if OP_CLASS[op] == cls
            for (s, f) in body["intervals"]
        )

    gpu_util = min(1.0, class_busy("gpu") / (system.inference.gpu.capacity * span))
    api_util = min(1.0, class_busy("api") / (system.inference.api.capacity * span))
    steady_completions = sum(1 for t in completion_times if w_lo < t <= w_hi)
    steady_throughput = steady_completions / (span / scale)

    busy_doc_seconds = sum(
        window_overlap(e.t - e.data["wall_duration"], e.t) for e in completions
    )
    worker_busy = busy_doc_seconds / (level * span) if level else 0.0

    attempts_by_doc: dict[str, int] = {}
    for e in events:
        if e.kind == "lease_received" and e.document_id is not None:
            attempts_by_doc[e.document_id] = max(
                attempts_by_doc.get(e.document_id, 0), e.attempt or 0
            )
    duplicate_deliveries = sum(1 for a in attempts_by_doc.values() if a >= 2)

    retries = sum(1 for e in events if e.kind in ("step_retry", "page_retry"))
    duplicate_completions = sum(1 for e in events if e.kind == "duplicate_completion")
    dead_letters = sum(1 for e in events if e.kind == "dead_letter")

    failed = 0
    billed_costs = []
    actual_costs = []
    parse_costs = []
    for document_id in document_ids:
        record = system.tracking.get(document_id)
        if record.status.kind.value == "failed":
            failed += 1
            continue
        if not record.cost_entries:
            continue
        actual = record.total_cost()
        parse_cost = sum(
            e["unit_cost"] for e in record.cost_entries if e["op"] == "parse"
        )
        non_classify = sum(
            e["unit_cost"]
            for e in record.cost_entries
            if e["op"] not in ("classify_vlm", "classify_clip")
        )
        billed = non_classify + HYBRID_BILLED_RATE_PER_PAGE * record.pages
        actual_costs.append(actual)
        parse_costs.append(parse_cost)
        billed_costs.append(billed)

    cost_per_doc = statistics.fmean(billed_costs) if billed_costs else 0.0
    api_cost_per_doc = statistics.fmean(actual_costs) if actual_costs else 0.0
    parse_cost_share = (
        statistics.fmean(parse_costs) / cost_per_doc if cost_per_doc else 0.0
    )

    throughput = completed / (wall_window / scale)

    metrics = LevelMetrics(
        level=level,
        seed=seed,
        docs=len(document_ids),
        completed=completed,
        failed=failed,
        wall_window=wall_window / scale,
        throughput=throughput,
        steady_throughput=steady_throughput,
        p50=p_quantile(latencies, 0.50) if latencies else 0.0,
        p95=p_quantile(latencies, 0.95) if latencies else 0.0,
        p99=p_quantile(latencies, 0.99) if latencies else 0.0,
        mean_latency=mean_latency,
        step_means=step_means,
        step_shares=step_shares,
        share_of_wall=share_of_wall,
        peak_queue_depth=system.worker_queue.stats.peak_visible,
        gpu_queue_wait_per_doc=gpu_wait_per_doc,
        api_queue_wait_per_doc=api_wait_per_doc,
        gpu_wait_ratio=gpu_wait_ratio,
        api_wait_ratio=api_wait_ratio,
        gpu_util=gpu_util,
        api_util=api_util,
        worker_busy=worker_busy,
        retries=retries,
        duplicate_deliveries=duplicate_deliveries,
        duplicate_completions=duplicate_completions,
        dead_letters=dead_letters,
        cost_per_doc=cost_per_doc,
        api_cost_per_doc=api_cost_per_doc,
        parse_cost_share=parse_cost_share,
    )
    metrics.bottleneck = classify_bottleneck(metrics)
    return metrics


def classify_bottleneck(metrics: LevelMetrics) -> str:
    """Assign the active bottleneck tier.

    - downstream: API-class slots saturated and API queue wait dominates.
    - inference: GPU slots saturated (util >= 0.95) and GPU queue wait
      dominates (wait/service >= 0.15).
    - workers: worker slots busy while inference queue wait is negligible.
    - ambiguous otherwise (reported, never guessed).
    """
    if (
        metrics.api_util >= UTIL_SATURATED
        and metrics.api_wait_ratio >= WAIT_DOMINANT_RATIO
        and metrics.api_wait_ratio >= metrics.gpu_wait_ratio
    ):
        return TIER_DOWNSTREAM
    if metrics.gpu_util >= UTIL_SATURATED and metrics.gpu_wait_ratio >= WAIT_DOMINANT_RATIO:
        return TIER_INFERENCE
    if (
        metrics.worker_busy >= WORKER_BUSY_MIN
        and metrics.gpu_wait_ratio < WAIT_DOMINANT_RATIO
        and metrics.api_wait_ratio < WAIT_DOMINANT_RATIO
    ):
        return TIER_WORKERS
    return TIER_AMBIGUOUS


def run_level(plan: ExperimentPlan, level: int, seed: int) -> LevelMetrics:
    """Run the corpus to completion at one concurrency level on fresh state."""
    system = build_system(
        plan.config,
        seed=seed,
        time_scale=plan.time_scale,
        gpu_slots=plan.resolved_gpu_slots(),
        api_concurrency=plan.resolved_api_concurrency(),
    )
    try:
        corpus = generate_corpus(
            n_docs=plan.docs,
            pages_distribution=PagesDistribution.fixed(plan.pages),
            label_distribution=plan.resolved_labels(),
            seed=seed,
            fields_by_label={
                name: list(dt.fields) for name, dt in plan.config.doc_types.items()
            },
        )
        system.start_pods(total_tasks=level)
        window_start = system.clock.now()
        ids = system.submit_corpus(corpus)
        system.wait_quiescent(ids, timeout=plan.quiescence_timeout)
        system.stop_pods()
        return compute_level_metrics(system, level, seed, ids, window_start)
    finally:
        system.shutdown()


@dataclass
class LevelAggregate:
    """Seed-averaged metrics for one level."""

    level: int
    throughput: float
    p50: float
    p95: float
    p99: float
    peak_queue_depth: float
    gpu_util: float
    retries: float
    duplicate_completions: float
    duplicate_deliveries: float
    cost_per_doc: float
    api_cost_per_doc: float
    parse_cost_share: float
    bottleneck: str
    per_seed: list[LevelMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        body = {k: v for k, v in self.__dict__.items() if k != "per_seed"}
        body["per_seed"] = [m.to_dict() for m in self.per_seed]
        return body


def aggregate_level(rows: list[LevelMetrics]) -> LevelAggregate:
    tiers = [m.bottleneck for m in rows]
    majority_tier = max(set(tiers), key=tiers.count)
    return LevelAggregate(
        level=rows[0].level,
        throughput=statistics.fmean(m.throughput for m in rows),
        p50=statistics.fmean(m.p50 for m in rows),
        p95=statistics.fmean(m.p95 for m in rows),
        p99=statistics.fmean(m.p99 for m in rows),
        peak_queue_depth=statistics.fmean(m.peak_queue_depth for m in rows),
        gpu_util=statistics.fmean(m.gpu_util for m in rows),
        retries=statistics.fmean(m.retries for m in rows),
        duplicate_completions=statistics.fmean(m.duplicate_completions for m in rows),
        duplicate_deliveries=statistics.fmean(m.duplicate_deliveries for m in rows),
        cost_per_doc=statistics.fmean(m.cost_per_doc for m in rows),
        api_cost_per_doc=statistics.fmean(m.api_cost_per_doc for m in rows),
        parse_cost_share=statistics.fmean(m.parse_cost_share for m in rows),
        bottleneck=majority_tier,
        per_seed=rows,
    )


@dataclass
class PlanResult:
    plan_summary: dict
    ceiling: float  # docs per modeled second, gpu_slots / gpu-seconds-per-doc
    c_sat: float  # concurrency where the ceiling binds
    rows: list[LevelAggregate] = field(default_factory=list)

    def row_for(self, level: int) -> LevelAggregate:
        for row in self.rows:
            if row.level == level:
                return row
        raise KeyError(f"no row for level {level}")

    def nearest_row(self, concurrency: float) -> LevelAggregate:
        return min(self.rows, key=lambda r: abs(r.level - concurrency))

    def to_dict(self) -> dict:
        return {
            "plan": self.plan_summary,
            "ceiling": self.ceiling,
            "c_sat": self.c_sat,
            "rows": [r.to_dict() for r in self.rows],
        }


def analytic_ceiling(plan: ExperimentPlan) -> tuple[float, float]:
    """(ceiling docs/s, C_sat) computed from the calibration, not measured."""
    system_config = plan.config
    from .worldgen import default_calibration

    calibration = default_calibration(
        system_config.profile_overrides or None, system_config.confidence_model
    )
    steps = system_config.steps_for(system_config.default_doc_type)
    gpu_seconds = expected_gpu_seconds_per_doc(calibration, steps, plan.pages)
    mean_doc = expected_doc_seconds(calibration, steps, plan.pages)
    ceiling = plan.resolved_gpu_slots() / gpu_seconds
    return ceiling, ceiling * mean_doc


def run_plan(plan: ExperimentPlan, progress: bool = False) -> PlanResult:
    ceiling, c_sat = analytic_ceiling(plan)
    result = PlanResult(
        plan_summary={
            "docs": plan.docs,
            "pages": plan.pages,
            "levels": list(plan.levels),
            "seeds": list(plan.seeds),
            "gpu_slots": plan.resolved_gpu_slots(),
            "api_concurrency": plan.resolved_api_concurrency(),
            "time_scale": plan.time_scale,
        },
        ceiling=ceiling,
        c_sat=c_sat,
    )
    for level in plan.levels:
        rows = []
        for seed in plan.seeds:
            try:
                metrics = run_level(plan, level, seed)
            except QuiescenceTimeout as exc:
                raise ExperimentError(
                    f"level {level} seed {seed} did not quiesce: {exc}", partial=result
                ) from exc
            rows.append(metrics)
            if progress:
                logger.info(
                    "level=%d seed=%d throughput=%.4f docs/s p95=%.2f tier=%s",
                    level,
                    seed,
                    metrics.throughput,
                    metrics.p95,
                    metrics.bottleneck,
                )
        result.rows.append(aggregate_level(rows))
    return result


def single_doc_profile(
    seed: int,
    config: Optional[PipelineConfig] = None,
    time_scale: float = 0.01,
    pages: int = 8,
) -> dict:
    """Per-step time breakdown for one document at concurrency 1."""
    config = config or default_config()
    plan = ExperimentPlan(
        config=config, docs=1, pages=pages, levels=(1,), seeds=(seed,), time_scale=time_scale
    )
    metrics = run_level(plan, level=1, seed=seed)
    return {
        "seed": seed,
        "wall_seconds": metrics.mean_latency,
        "step_seconds": metrics.step_means,
        "shares": metrics.step_shares,
        "share_of_wall": metrics.share_of_wall,
    }


def emit_report(result: PlanResult, out_dir: str | Path) -> dict[str, Path]:
    """Write report.csv (fixed column order) and a canonical JSON mirror."""
    if not result.rows:
        raise ExperimentError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    json_path = out / "report.json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in result.rows:
            writer.writerow(
                [
                    row.level,
                    f"{row.throughput:.4f}",
                    f"{row.p50:.3f}",
                    f"{row.p95:.3f}",
                    f"{row.p99:.3f}",
                    f"{row.peak_queue_depth:.1f}",
                    f"{row.gpu_util:.3f}",
                    f"{row.retries:.1f}",
                    f"{row.duplicate_completions:.1f}",
                    f"{row.cost_per_doc:.6f}",
                    row.bottleneck,
                ]
            )
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(_round_floats(result.to_dict())) + "\n")
    return {"csv": csv_path, "json": json_path}


def write_corpus_manifest(plan: ExperimentPlan, seed: int, out_dir: str | Path) -> Path:
    corpus = generate_corpus(
        n_docs=plan.docs,
        pages_distribution=PagesDistribution.fixed(plan.pages),
        label_distribution=plan.resolved_labels(),
        seed=seed,
        fields_by_label={name: list(dt.fields) for name, dt in plan.config.doc_types.items()},
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"corpus-{seed}.manifest"
    path.write_text(corpus_manifest(corpus, seed), encoding="utf-8")
    return path


def _round_floats(value, places: int = 6):
    if isinstance(value, float):
        return round(value, places)
    if isinstance(value, dict):
        return {k: _round_floats(v, places) for k, v in value.items()}
    if isinstance(value, list):
        return [_round_floats(v, places) for v in value]
    return value
