"""Command-line interface.

``profiler run`` executes a concurrency sweep and writes reports;
``profiler single-doc`` prints one document's step breakdown;
``profiler calibrate`` reproduces the classification strategy comparison and
exits 2 if any calibration check fails; ``profiler serve`` runs the gateway
or inference service as an HTTP process.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import PipelineConfig, default_config, load_config
from .profiler import ExperimentPlan, emit_report, run_plan, single_doc_profile, write_corpus_manifest
from .worldgen import default_calibration, expected_hybrid_cost_per_page, run_calibration

CALIBRATION_CHECKS = (
    ("clip_accuracy", 0.92, 0.01),
    ("vlm_accuracy", 0.98, 0.01),
    ("hybrid_accuracy", 0.96, 0.01),
    ("fallback_rate", 0.04, 0.01),
)
HYBRID_COST_INTERVAL = (0.0004, 0.001)


def _load(config_path: str | None) -> PipelineConfig:
    if config_path is None:
        return default_config()
    return load_config(config_path)


@click.group()
def main() -> None:
    """Document pipeline profiler and services."""


@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--docs", default=300, show_default=True)
@click.option("--pages", default=8, show_default=True)
@click.option("--levels", default="1,2,5,10,25,50", show_default=True)
@click.option("--gpu-slots", default=None, type=int)
@click.option("--api-concurrency", default=None, type=int)
@click.option("--time-scale", default=0.01, show_default=True)
@click.option("--seeds", default=5, show_default=True, help="number of seeds (1..n)")
@click.option("--out", "out_dir", type=click.Path(), default="reports")
def run_command(config_path, docs, pages, levels, gpu_slots, api_concurrency, time_scale, seeds, out_dir):
    """Run a concurrency sweep and write report.csv / report.json."""
    config = _load(config_path)
    plan = ExperimentPlan(
        config=config,
        docs=docs,
        pages=pages,
        levels=tuple(int(x) for x in levels.split(",") if x),
        seeds=tuple(range(1, seeds + 1)),
        time_scale=time_scale,
        gpu_slots=gpu_slots,
        api_concurrency=api_concurrency,
    )
    click.echo(
        f"sweep: levels={list(plan.levels)} docs={docs} seeds={len(plan.seeds)} "
        f"gpu_slots={plan.resolved_gpu_slots()} api={plan.resolved_api_concurrency()}"
    )
    result = run_plan(plan, progress=True)
    click.echo(
        f"analytic ceiling {result.ceiling:.4f} docs/s, C_sat ~= {result.c_sat:.1f} tasks"
    )
    for row in result.rows:
        click.echo(
            f"  level {row.level:>3}: throughput {row.throughput:.4f} docs/s "
            f"p95 {row.p95:.1f} s gpu_util {row.gpu_util:.2f} "
            f"cost ${row.cost_per_doc:.4f} tier {row.bottleneck}"
        )
    write_corpus_manifest(plan, plan.seeds[0], out_dir)
    paths = emit_report(result, out_dir)
    click.echo(f"wrote {paths['csv']} and {paths['json']}")


@main.command("single-doc")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", default=1, show_default=True)
@click.option("--time-scale", default=0.01, show_default=True)
def single_doc_command(config_path, seed, time_scale):
    """Profile one 8-page document at concurrency 1."""
    profile = single_doc_profile(seed, _load(config_path), time_scale)
    click.echo(f"document wall time: {profile['wall_seconds']:.2f} s (modeled)")
    for step, share in sorted(profile["shares"].items(), key=lambda kv: -kv[1]):
        click.echo(f"  {step:<10} {profile['step_seconds'][step]:7.2f} s  share {share:.3f}")


@main.command("calibrate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--pages", "pages_per_seed", default=10_000, show_default=True)
@click.option("--seeds", default=5, show_default=True)
@click.option("--json", "as_json", is_flag=True, default=False)
def calibrate_command(config_path, pages_per_seed, seeds, as_json):
    """Monte-Carlo reproduction of the classification strategy table.

    Exits 0 when every calibration target is met, 2 otherwise.
    """
    config = _load(config_path)
    calibration = default_calibration(
        config.profile_overrides or None, config.confidence_model
    )
    report = run_calibration(
        seeds=tuple(range(1, seeds + 1)),
        pages_per_seed=pages_per_seed,
        labels=config.labels(),
        calibration=calibration,
        threshold=config.clip_confidence_threshold,
    )
    failures = []
    for name, target, tolerance in CALIBRATION_CHECKS:
        value = getattr(report, name)
        ok = abs(value - target) <= tolerance
        if not ok:
            failures.append(name)
        click.echo(
            f"{'PASS' if ok else 'FAIL'} {name:<16} {value:.4f} "
            f"(target {target} +/- {tolerance})"
        )
    lo, hi = HYBRID_COST_INTERVAL
    cost = report.expected_cost_per_page
    cost_ok = lo <= cost <= hi
    if not cost_ok:
        failures.append("hybrid_cost_per_page")
    click.echo(
        f"{'PASS' if cost_ok else 'FAIL'} hybrid cost/page  ${cost:.5f} expected "
        f"(empirical ${report.empirical_cost_per_page:.5f}; interval [${lo}, ${hi}])"
    )
    click.echo(
        f"     hybrid latency/page {report.expected_hybrid_latency:.2f} s expected "
        f"under the active profile"
    )
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if failures:
        click.echo(f"calibration failures: {failures}")
        sys.exit(2)


@main.command("serve")
@click.option("--service", type=click.Choice(["gateway", "inference"]), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8100, show_default=True)
@click.option("--root", type=click.Path(), default="docflow-data", show_default=True)
@click.option("--time-scale", default=1.0, show_default=True)
def serve_command(service, config_path, host, port, root, time_scale):
    """Serve the gateway or the inference service over HTTP."""
    import uvicorn

    from .runtime import build_system

    config = _load(config_path)
    Path(root).mkdir(parents=True, exist_ok=True)
    system = build_system(config, root=root, time_scale=time_scale)
    if service == "inference":
        from .inference_http import build_inference_app

        app = build_inference_app(system.inference)
    else:
        from .gateway_http import build_gateway_app

        app = build_gateway_app(system.gateway)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
