"""Pipeline configuration: strict YAML parsing, defaults, ordering invariants.

Top-level keys: ``doc_types``, ``queue``, ``inference``, ``worker``,
``profiler``. Unknown keys anywhere are errors. The full key reference lives
in the repository README.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .domain import PIPELINE_STEPS, ordered_steps

DEFAULT_CLIP_THRESHOLD = 0.7
DEFAULT_VISIBILITY_TIMEOUT = 300.0
DEFAULT_TASKS_PER_POD = 5
DEFAULT_PODS = 5
DEFAULT_GPU_SLOTS = 4
DEFAULT_API_CONCURRENCY = 16
DEFAULT_MAX_DELIVERY = 5
DEFAULT_STEP_RETRY_LIMIT = 2
DEFAULT_PAGE_RETRY_LIMIT = 2
DEFAULT_TIME_SCALE = 1.0
DEFAULT_SEED = 42

_CONFIDENCE_MODELS = ("two_point", "beta")


class ConfigError(Exception):
    """Raised when a configuration document violates a constraint.

    The message always names the offending key.
    """


@dataclass(frozen=True)
class DocTypeConfig:
    """Pipeline + output schema for one document type."""

    steps: tuple[str, ...]
    fields: tuple[str, ...]


@dataclass(frozen=True)
class PipelineConfig:
    doc_types: dict[str, DocTypeConfig]
    clip_confidence_threshold: float = DEFAULT_CLIP_THRESHOLD
    visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT
    # 0.0 means "auto": resolved at wiring time to 2x the analytic P99
    # document processing time of the active calibration.
    stale_threshold: float = 0.0
    max_delivery: int = DEFAULT_MAX_DELIVERY
    tasks_per_pod: int = DEFAULT_TASKS_PER_POD
    pods: int = DEFAULT_PODS
    gpu_slots: int = DEFAULT_GPU_SLOTS
    api_concurrency: int = DEFAULT_API_CONCURRENCY
    inference_queue_cap: Optional[int] = None
    malformed_output_rate: float = 0.0
    step_retry_limit: int = DEFAULT_STEP_RETRY_LIMIT
    page_retry_limit: int = DEFAULT_PAGE_RETRY_LIMIT
    ocr_page_checkpoints: bool = False
    confidence_model: str = "two_point"
    profile_overrides: dict[str, dict] = field(default_factory=dict)
    time_scale: float = DEFAULT_TIME_SCALE
    seed: int = DEFAULT_SEED

    @property
    def default_doc_type(self) -> str:
        return next(iter(self.doc_types))

    def steps_for(self, doc_type: str) -> tuple[str, ...]:
        return self.doc_types[doc_type].steps

    def fields_for(self, doc_type: str) -> tuple[str, ...]:
        return self.doc_types[doc_type].fields

    def labels(self) -> tuple[str, ...]:
        return tuple(sorted(self.doc_types))

    def to_dict(self) -> dict:
        """Canonical mapping form; parse_config(to_dict()) round-trips."""
        return {
            "doc_types": {
                name: {"steps": list(dt.steps), "fields": list(dt.fields)}
                for name, dt in self.doc_types.items()
            },
            "queue": {
                "visibility_timeout": self.visibility_timeout,
                "stale_threshold": self.stale_threshold,
                "max_delivery": self.max_delivery,
            },
            "inference": {
                "gpu_slots": self.gpu_slots,
                "api_concurrency": self.api_concurrency,
                "clip_confidence_threshold": self.clip_confidence_threshold,
                "malformed_output_rate": self.malformed_output_rate,
                "queue_cap": self.inference_queue_cap,
                "profiles": {k: dict(v) for k, v in self.profile_overrides.items()},
            },
            "worker": {
                "pods": self.pods,
                "tasks_per_pod": self.tasks_per_pod,
                "step_retry_limit": self.step_retry_limit,
                "page_retry_limit": self.page_retry_limit,
                "ocr_page_checkpoints": self.ocr_page_checkpoints,
            },
            "profiler": {
                "time_scale": self.time_scale,
                "seed": self.seed,
                "confidence_model": self.confidence_model,
            },
        }


def _require_mapping(value: Any, key: str) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(section: Mapping, key: str, allowed: set[str]) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{key}: unknown keys {unknown}")


def _number(section: Mapping, key: str, name: str, default, *, positive=False, nonneg=False):
    value = section.get(name, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}.{name}: expected a number")
    value = float(value)
    if positive and value <= 0:
        raise ConfigError(f"{key}.{name}: must be > 0")
    if nonneg and value < 0:
        raise ConfigError(f"{key}.{name}: must be >= 0")
    return value


def _integer(section: Mapping, key: str, name: str, default, *, minimum=1) -> int:
    value = section.get(name, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key}.{name}: expected an integer")
    if value < minimum:
        raise ConfigError(f"{key}.{name}: must be >= {minimum}")
    return value


def _validate_steps(name: str, steps: list) -> tuple[str, ...]:
    key = f"doc_types.{name}.steps"
    if not isinstance(steps, list) or not steps:
        raise ConfigError(f"{key}: expected a non-empty list")
    try:
        parsed = ordered_steps(steps)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    if len(set(parsed)) != len(parsed):
        raise ConfigError(f"{key}: duplicate steps")
    order = {s: i for i, s in enumerate(parsed)}
    if "parse" in order and order["parse"] != len(parsed) - 1:
        raise ConfigError(f"{key}: parse must be the last step")
    for earlier, later in (("ocr", "stitch"), ("stitch", "parse"), ("ocr", "parse")):
        if earlier in order and later in order and order[earlier] > order[later]:
            raise ConfigError(f"{key}: {earlier} must precede {later}")
    # Steps that consume another step's output need that step present.
    if "stitch" in order and "ocr" not in order:
        raise ConfigError(f"{key}: stitch requires ocr")
    if "parse" in order and "stitch" not in order:
        raise ConfigError(f"{key}: parse requires stitch")
    return tuple(parsed)


def parse_config(raw: Mapping) -> PipelineConfig:
    """Validate a raw configuration mapping into a :class:`PipelineConfig`.

    All defaults are filled in (clip threshold 0.7, visibility timeout 300 s,
    5 tasks per pod, ...); ordering invariants on step lists are enforced.
    """
    root = _require_mapping(raw, "<config>")
    _check_keys(root, "<config>", {"doc_types", "queue", "inference", "worker", "profiler"})

    raw_types = _require_mapping(root.get("doc_types", {}), "doc_types")
    if not raw_types:
        raise ConfigError("doc_types: at least one document type is required")
    doc_types: dict[str, DocTypeConfig] = {}
    for name, body in raw_types.items():
        body = _require_mapping(body, f"doc_types.{name}")
        _check_keys(body, f"doc_types.{name}", {"steps", "fields"})
        steps = _validate_steps(name, body.get("steps"))
        fields = body.get("fields", [])
        if not isinstance(fields, list) or not all(isinstance(f, str) and f for f in fields):
            raise ConfigError(f"doc_types.{name}.fields: expected a list of field names")
        if "parse" in steps and not fields:
            raise ConfigError(f"doc_types.{name}.fields: required when the pipeline parses")
        doc_types[name] = DocTypeConfig(steps=steps, fields=tuple(fields))

    queue = _require_mapping(root.get("queue", {}), "queue")
    _check_keys(queue, "queue", {"visibility_timeout", "stale_threshold", "max_delivery"})
    visibility_timeout = _number(
        queue, "queue", "visibility_timeout", DEFAULT_VISIBILITY_TIMEOUT, positive=True
    )
    stale_threshold = _number(queue, "queue", "stale_threshold", 0.0, nonneg=True)
    max_delivery = _integer(queue, "queue", "max_delivery", DEFAULT_MAX_DELIVERY)

    inference = _require_mapping(root.get("inference", {}), "inference")
    _check_keys(
        inference,
        "inference",
        {
            "gpu_slots",
            "api_concurrency",
            "clip_confidence_threshold",
            "malformed_output_rate",
            "queue_cap",
            "profiles",
        },
    )
    gpu_slots = _integer(inference, "inference", "gpu_slots", DEFAULT_GPU_SLOTS)
    api_concurrency = _integer(inference, "inference", "api_concurrency", DEFAULT_API_CONCURRENCY)
    threshold = _number(
        inference, "inference", "clip_confidence_threshold", DEFAULT_CLIP_THRESHOLD
    )
    if not 0.0 < threshold < 1.0:
        raise ConfigError("inference.clip_confidence_threshold: must be in (0, 1)")
    malformed = _number(inference, "inference", "malformed_output_rate", 0.0, nonneg=True)
    if malformed > 1.0:
        raise ConfigError("inference.malformed_output_rate: must be <= 1")
    queue_cap = inference.get("queue_cap")
    if queue_cap is not None:
        if isinstance(queue_cap, bool) or not isinstance(queue_cap, int) or queue_cap < 0:
            raise ConfigError("inference.queue_cap: expected null or an integer >= 0")
    profiles = _require_mapping(inference.get("profiles", {}), "inference.profiles")
    profile_overrides: dict[str, dict] = {}
    for pname, body in profiles.items():
        body = _require_mapping(body, f"inference.profiles.{pname}")
        _check_keys(body, f"inference.profiles.{pname}", {"latency", "accuracy", "unit_cost"})
        profile_overrides[pname] = dict(body)

    worker = _require_mapping(root.get("worker", {}), "worker")
    _check_keys(
        worker,
        "worker",
        {"pods", "tasks_per_pod", "step_retry_limit", "page_retry_limit", "ocr_page_checkpoints"},
    )
    pods = _integer(worker, "worker", "pods", DEFAULT_PODS)
    tasks_per_pod = _integer(worker, "worker", "tasks_per_pod", DEFAULT_TASKS_PER_POD)
    step_retry_limit = _integer(worker, "worker", "step_retry_limit", DEFAULT_STEP_RETRY_LIMIT, minimum=0)
    page_retry_limit = _integer(worker, "worker", "page_retry_limit", DEFAULT_PAGE_RETRY_LIMIT, minimum=0)
    ocr_page_checkpoints = worker.get("ocr_page_checkpoints", False)
    if not isinstance(ocr_page_checkpoints, bool):
        raise ConfigError("worker.ocr_page_checkpoints: expected a boolean")

    prof = _require_mapping(root.get("profiler", {}), "profiler")
    _check_keys(prof, "profiler", {"time_scale", "seed", "confidence_model"})
    time_scale = _number(prof, "profiler", "time_scale", DEFAULT_TIME_SCALE, positive=True)
    seed = _integer(prof, "profiler", "seed", DEFAULT_SEED, minimum=0)
    confidence_model = prof.get("confidence_model", "two_point")
    if confidence_model not in _CONFIDENCE_MODELS:
        raise ConfigError(
            f"profiler.confidence_model: expected one of {list(_CONFIDENCE_MODELS)}"
        )

    return PipelineConfig(
        doc_types=doc_types,
        clip_confidence_threshold=threshold,
        visibility_timeout=visibility_timeout,
        stale_threshold=stale_threshold,
        max_delivery=max_delivery,
        tasks_per_pod=tasks_per_pod,
        pods=pods,
        gpu_slots=gpu_slots,
        api_concurrency=api_concurrency,
        inference_queue_cap=queue_cap,
        malformed_output_rate=malformed,
        step_retry_limit=step_retry_limit,
        page_retry_limit=page_retry_limit,
        ocr_page_checkpoints=ocr_page_checkpoints,
        confidence_model=confidence_model,
        profile_overrides=profile_overrides,
        time_scale=time_scale,
        seed=seed,
    )


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a YAML configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raise ConfigError(f"{path}: empty configuration file")
    return parse_config(raw)


def dump_config(config: PipelineConfig) -> str:
    """Serialize a config back to YAML (round-trips through parse_config)."""
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def default_config() -> PipelineConfig:
    """The built-in document types and deployment defaults."""
    return parse_config(
        {
            "doc_types": {
                "invoice": {
                    "steps": ["classify", "ocr", "stitch", "parse"],
                    "fields": ["invoice_number", "invoice_date", "total_amount", "vendor_name"],
                },
                "claim_form": {
                    "steps": ["classify", "ocr", "stitch", "parse"],
                    "fields": ["claim_id", "claimant_name", "incident_date", "amount_claimed"],
                },
                "correspondence": {
                    "steps": ["classify", "ocr", "stitch", "parse"],
                    "fields": ["sender", "recipient", "subject", "date_sent"],
                },
                "scanned_mail": {
                    "steps": ["classify", "metadata", "ocr", "stitch", "parse"],
                    "fields": ["sender", "postmark_date", "tracking_number", "recipient"],
                },
            }
        }
    )
