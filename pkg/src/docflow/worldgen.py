"""Synthetic corpus generation and stochastic model-backend sampling.

All sampling is a pure function of (identifiers, seed): every draw comes from
a hash-derived substream keyed by (seed, document_id, page_index, operation),
never from a shared RNG. Re-running any document's pipeline with the same
seed therefore yields identical step outputs regardless of scheduling.

Classifier calibration
----------------------

Each page is *hard* with probability ``P_HARD`` (drawn at corpus generation
and stored as ground truth). The local classifier's confidence is
dichotomized by difficulty: easy pages always score above the acceptance
threshold, hard pages always below, so the fallback rate equals ``P_HARD``
exactly. Accuracy targets: standalone local classifier 0.92, standalone VLM
0.98, hybrid 0.96. Solving the two-point mixture for those targets gives an
easy-page accuracy of 0.9208/0.96 and a hard-page accuracy of -0.02, which is
infeasible; the hard-page accuracy is clamped to 0.0, putting standalone
local accuracy at 0.9208 (within the +/-0.01 calibration band) while the
hybrid and VLM targets hold exactly.

The parse token model is linear in stitched word count, anchored so that the
default 8-page document (960 words) consumes 4,500 input / 400 output tokens
and costs $0.03.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from .config import ConfigError
from .domain import Document, PageRef, page_blob_key
from .store import canonical_json

# Hybrid-classifier mixture constants (see module docstring).
P_HARD = 0.04
VLM_ACCURACY = 0.98
HYBRID_TARGET = 0.96
EASY_CLIP_ACCURACY = (HYBRID_TARGET - P_HARD * VLM_ACCURACY) / (1.0 - P_HARD)  # ~0.959167
HARD_CLIP_ACCURACY = 0.0  # clamped; the exact solution is negative
CLIP_STANDALONE_ACCURACY = (1.0 - P_HARD) * EASY_CLIP_ACCURACY + P_HARD * HARD_CLIP_ACCURACY

# Parse token model anchors: an 8-page document of 120 words/page.
ANCHOR_WORDS = 960
ANCHOR_INPUT_TOKENS = 4500
ANCHOR_OUTPUT_TOKENS = 400
INPUT_TOKENS_PER_WORD = ANCHOR_INPUT_TOKENS / ANCHOR_WORDS
OUTPUT_TOKENS_PER_WORD = ANCHOR_OUTPUT_TOKENS / ANCHOR_WORDS
# Per-token prices chosen so the anchored document costs $0.03.
PRICE_PER_INPUT_TOKEN = 4.0e-6
PRICE_PER_OUTPUT_TOKEN = 3.0e-5

VLM_CLASSIFY_COST = 0.010
PARSE_ANCHOR_COST = (
    ANCHOR_INPUT_TOKENS * PRICE_PER_INPUT_TOKEN + ANCHOR_OUTPUT_TOKENS * PRICE_PER_OUTPUT_TOKEN
)

# Blended per-page classification rate used for billed cost attribution
# (the selective-fallback strategy is charged at a flat page rate).
HYBRID_BILLED_RATE_PER_PAGE = 0.001

_WORDS = (
    "ledger account amount remit invoice claim policy statement review page "
    "form date signature total vendor notice reference submitted approved "
    "postal carrier registered copy original scanned archive dispatch filed "
    "audit entry balance payment schedule contract terms party agreement "
    "witness county record number street avenue suite district region office"
).split()


class EmptyInput(Exception):
    """Raised when an operation receives empty text."""


@dataclass(frozen=True)
class BackendProfile:
    """Latency/accuracy/cost parameters for one simulated model backend."""

    name: str
    latency: tuple[float, float]  # uniform range, seconds, pre time_scale
    accuracy: float
    unit_cost: float

    def __post_init__(self) -> None:
        lo, hi = self.latency
        if not (0 < lo <= hi):
            raise ConfigError(f"profile {self.name}: latency range must be positive")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError(f"profile {self.name}: accuracy must be in [0, 1]")
        if self.unit_cost < 0:
            raise ConfigError(f"profile {self.name}: unit_cost must be >= 0")

    @property
    def mean_latency(self) -> float:
        return (self.latency[0] + self.latency[1]) / 2.0


@dataclass(frozen=True)
class CalibrationSet:
    """The default profiles plus the confidence-model parameters."""

    profiles: Mapping[str, BackendProfile]
    p_hard: float = P_HARD
    easy_clip_accuracy: float = EASY_CLIP_ACCURACY
    hard_clip_accuracy: float = HARD_CLIP_ACCURACY
    confidence_model: str = "two_point"

    def profile(self, name: str) -> BackendProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise KeyError(f"unknown backend profile: {name}") from None


def default_calibration(
    overrides: Optional[Mapping[str, Mapping]] = None,
    confidence_model: str = "two_point",
) -> CalibrationSet:
    """Default backend profiles.

    The local classifier's latency is set to 0.15-0.25 s/page (below its
    nominal 0.5-1 s/page serving range, kept in :func:`table1_calibration`)
    so that an 8-page document's classification stays cheaper than its single
    parse call and OCR holds roughly two-thirds of the execution profile.
    """
    profiles = {
        "clip": BackendProfile("clip", (0.15, 0.25), CLIP_STANDALONE_ACCURACY, 0.0),
        "vlm_classify": BackendProfile("vlm_classify", (2.0, 3.0), VLM_ACCURACY, VLM_CLASSIFY_COST),
        "ocr": BackendProfile("ocr", (1.0, 2.0), 1.0, 0.0),
        "detect": BackendProfile("detect", (0.3, 0.6), 0.90, 0.0),
        "stitch": BackendProfile("stitch", (0.05, 0.15), 1.0, 0.0),
        "parse": BackendProfile("parse", (2.5, 3.5), 0.95, 0.0),
    }
    for name, body in (overrides or {}).items():
        if name not in profiles:
            raise ConfigError(f"inference.profiles.{name}: unknown backend profile")
        base = profiles[name]
        latency = tuple(body.get("latency", base.latency))
        if len(latency) != 2:
            raise ConfigError(f"inference.profiles.{name}.latency: expected [lo, hi]")
        profiles[name] = BackendProfile(
            name,
            (float(latency[0]), float(latency[1])),
            float(body.get("accuracy", base.accuracy)),
            float(body.get("unit_cost", base.unit_cost)),
        )
    return CalibrationSet(profiles=profiles, confidence_model=confidence_model)


def table1_calibration() -> CalibrationSet:
    """Calibration with the local classifier at its nominal 0.5-1 s/page."""
    return default_calibration(overrides={"clip": {"latency": [0.5, 1.0]}})


# --------------------------------------------------------------------------
# Deterministic substreams
# --------------------------------------------------------------------------


def substream(seed: int, *parts) -> random.Random:
    """An independent RNG derived from (seed, *parts) by hashing."""
    key = "|".join([str(seed), *[str(p) for p in parts]])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


# --------------------------------------------------------------------------
# Corpus generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PagesDistribution:
    """Page-count distribution: fixed(n), uniform(lo, hi) or choices(weights)."""

    kind: str = "fixed"
    n: int = 8
    lo: int = 1
    hi: int = 1
    choices: tuple[tuple[int, float], ...] = ()

    @staticmethod
    def fixed(n: int) -> "PagesDistribution":
        if n < 1:
            raise ConfigError("pages_distribution: fixed page count must be >= 1")
        return PagesDistribution(kind="fixed", n=n)

    @staticmethod
    def uniform(lo: int, hi: int) -> "PagesDistribution":
        if not (1 <= lo <= hi):
            raise ConfigError("pages_distribution: need 1 <= lo <= hi")
        return PagesDistribution(kind="uniform", lo=lo, hi=hi)

    @staticmethod
    def weighted(choices: Mapping[int, float]) -> "PagesDistribution":
        items = tuple(sorted((int(k), float(v)) for k, v in choices.items()))
        if not items or any(k < 1 or v < 0 for k, v in items) or not any(v for _, v in items):
            raise ConfigError("pages_distribution: invalid weighted choices")
        return PagesDistribution(kind="choices", choices=items)

    def sample(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return self.n
        if self.kind == "uniform":
            return rng.randint(self.lo, self.hi)
        counts = [k for k, _ in self.choices]
        weights = [w for _, w in self.choices]
        return rng.choices(counts, weights=weights, k=1)[0]

    def mean(self) -> float:
        if self.kind == "fixed":
            return float(self.n)
        if self.kind == "uniform":
            return (self.lo + self.hi) / 2.0
        total = sum(w for _, w in self.choices)
        return sum(k * w for k, w in self.choices) / total


@dataclass(frozen=True)
class SyntheticPage:
    ref: PageRef
    true_label: str
    difficulty: str  # "easy" | "hard"
    true_text: tuple[str, ...]
    true_fields: Mapping[str, str]
    is_cover: bool
    metadata: Mapping[str, str]

    def payload(self) -> bytes:
        """Self-describing page blob carrying ground truth in-band."""
        return canonical_json(
            {
                "document_id": self.ref.document_id,
                "page_index": self.ref.page_index,
                "true_label": self.true_label,
                "difficulty": self.difficulty,
                "words": list(self.true_text),
                "fields": dict(self.true_fields),
                "is_cover": self.is_cover,
                "metadata": dict(self.metadata),
            }
        ).encode("utf-8")


@dataclass(frozen=True)
class PagePayload:
    """Parsed form of a page blob (what the inference simulator reads)."""

    document_id: str
    page_index: int
    true_label: str
    difficulty: str
    words: tuple[str, ...]
    fields: Mapping[str, str]
    is_cover: bool
    metadata: Mapping[str, str]


def parse_page_payload(data: bytes) -> PagePayload:
    body = json.loads(data.decode("utf-8"))
    return PagePayload(
        document_id=body["document_id"],
        page_index=body["page_index"],
        true_label=body["true_label"],
        difficulty=body["difficulty"],
        words=tuple(body["words"]),
        fields=body["fields"],
        is_cover=body["is_cover"],
        metadata=body["metadata"],
    )


@dataclass(frozen=True)
class GeneratedDocument:
    document: Document
    pages: tuple[SyntheticPage, ...]


def _field_value(rng: random.Random, doc_id: str, name: str) -> str:
    return f"{name}:{doc_id[-5:]}-{rng.randrange(10_000, 99_999)}"


def generate_corpus(
    n_docs: int,
    pages_distribution: PagesDistribution,
    label_distribution: Mapping[str, float],
    seed: int,
    fields_by_label: Mapping[str, Sequence[str]],
    words_per_page: tuple[int, int] = (100, 140),
    p_hard: float = P_HARD,
) -> list[GeneratedDocument]:
    """Generate a deterministic synthetic corpus with ground truth."""
    if n_docs <= 0:
        raise ConfigError("generate_corpus: n_docs must be > 0")
    labels = sorted(label_distribution)
    weights = [label_distribution[l] for l in labels]
    if not labels or any(w < 0 for w in weights) or not any(weights):
        raise ConfigError("generate_corpus: invalid label_distribution")
    unknown = sorted(set(labels) - set(fields_by_label))
    if unknown:
        raise ConfigError(f"generate_corpus: labels without field schemas: {unknown}")
    lo_w, hi_w = words_per_page
    if not (1 <= lo_w <= hi_w):
        raise ConfigError("generate_corpus: invalid words_per_page range")

    corpus: list[GeneratedDocument] = []
    for i in range(n_docs):
        doc_id = f"doc-{seed}-{i:05d}"
        doc_rng = substream(seed, doc_id, "doc")
        label = doc_rng.choices(labels, weights=weights, k=1)[0]
        n_pages = pages_distribution.sample(doc_rng)
        true_fields = {
            name: _field_value(doc_rng, doc_id, name) for name in fields_by_label[label]
        }
        pages = []
        for p in range(n_pages):
            page_rng = substream(seed, doc_id, p, "page")
            difficulty = "hard" if page_rng.random() < p_hard else "easy"
            n_words = page_rng.randint(lo_w, hi_w)
            words = tuple(page_rng.choice(_WORDS) for _ in range(n_words))
            is_cover = p == 0
            metadata = (
                {
                    "date_stamp": f"2024-{1 + page_rng.randrange(12):02d}-{1 + page_rng.randrange(28):02d}",
                    "barcode": f"BC{page_rng.randrange(10**8):08d}",
                }
                if is_cover
                else {}
            )
            pages.append(
                SyntheticPage(
                    ref=PageRef(doc_id, p, page_blob_key(doc_id, p)),
                    true_label=label,
                    difficulty=difficulty,
                    true_text=words,
                    true_fields=true_fields,
                    is_cover=is_cover,
                    metadata=metadata,
                )
            )
        document = Document(
            id=doc_id,
            pages=tuple(pg.ref for pg in pages),
            doc_type=label,
            submitted_at=0.0,
        )
        corpus.append(GeneratedDocument(document=document, pages=tuple(pages)))
    return corpus


def corpus_manifest(corpus: Iterable[GeneratedDocument], seed: int) -> str:
    """One canonical record per document, for reproducibility audits."""
    lines = []
    for gd in corpus:
        lines.append(
            canonical_json(
                {
                    "document_id": gd.document.id,
                    "label": gd.document.doc_type,
                    "pages": len(gd.pages),
                    "seed": seed,
                }
            )
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierOutcome:
    label: str
    confidence: float


def sample_classifier_outcome(
    page: PagePayload,
    backend: str,
    seed: int,
    labels: Sequence[str],
    calibration: CalibrationSet,
) -> ClassifierOutcome:
    """Deterministic (label, confidence) draw for one page and backend.

    ``backend`` is "clip" or "vlm_classify". The VLM reports confidence 1.0.
    """
    if backend not in ("clip", "vlm_classify"):
        raise ValueError(f"not a classifier backend: {backend}")
    rng = substream(seed, page.document_id, page.page_index, backend, "classify")
    if backend == "vlm_classify":
        accuracy = calibration.profile("vlm_classify").accuracy
        confidence = 1.0
    else:
        hard = page.difficulty == "hard"
        accuracy = calibration.hard_clip_accuracy if hard else calibration.easy_clip_accuracy
        if calibration.confidence_model == "beta":
            confidence = (
                0.7 * rng.betavariate(2, 5) if hard else 0.7 + 0.3 * rng.betavariate(5, 2)
            )
        else:
            confidence = 0.5 if hard else 0.9
    if rng.random() < accuracy:
        label = page.true_label
    else:
        others = [l for l in labels if l != page.true_label] or [page.true_label]
        label = others[rng.randrange(len(others))]
    return ClassifierOutcome(label=label, confidence=confidence)


def sample_latency(
    op_name: str,
    backend: BackendProfile,
    seed: int,
    time_scale: float,
    document_id: str,
    page_index: Optional[int] = None,
) -> float:
    """Uniform draw within the profile range, multiplied by time_scale."""
    if time_scale <= 0:
        raise ValueError("time_scale must be > 0")
    rng = substream(seed, document_id, page_index if page_index is not None else "-", op_name, "latency")
    lo, hi = backend.latency
    return rng.uniform(lo, hi) * time_scale


@dataclass(frozen=True)
class OcrWord:
    text: str
    box: tuple[float, float, float, float]  # normalized (x0, y0, x1, y1)
    confidence: float


_layout_cache: dict[int, list[tuple[float, float, float, float]]] = {}


def _reading_order_boxes(n_words: int) -> list[tuple[float, float, float, float]]:
    """Normalized word boxes for an n-word page (cached: layout depends only
    on the word count)."""
    boxes = _layout_cache.get(n_words)
    if boxes is not None:
        return boxes
    per_line = 8
    n_lines = max(1, math.ceil(n_words / per_line))
    line_h = 1.0 / (n_lines + 1)
    boxes = []
    for i in range(n_words):
        row, col = divmod(i, per_line)
        x0 = col / per_line
        y0 = row * line_h
        boxes.append(
            (round(x0, 4), round(y0, 4), round(x0 + 0.9 / per_line, 4), round(y0 + 0.8 * line_h, 4))
        )
    _layout_cache[n_words] = boxes
    return boxes


def sample_ocr_result(page: PagePayload, seed: int) -> list[OcrWord]:
    """Ground-truth words laid out in reading order with drawn confidences."""
    rng = substream(seed, page.document_id, page.page_index, "ocr", "words")
    boxes = _reading_order_boxes(len(page.words))
    return [
        OcrWord(text=text, box=box, confidence=round(rng.uniform(0.90, 0.99), 4))
        for text, box in zip(page.words, boxes)
    ]


def sample_detect_outcome(
    page: PagePayload, backend: BackendProfile, seed: int
) -> dict[str, str]:
    """Metadata record equal to ground truth with the backend's accuracy."""
    rng = substream(seed, page.document_id, page.page_index, backend.name, "detect")
    metadata = dict(page.metadata)
    if metadata and rng.random() >= backend.accuracy:
        key = sorted(metadata)[rng.randrange(len(metadata))]
        metadata[key] = f"{metadata[key]}#err"
    return metadata


@dataclass(frozen=True)
class ParseOutcome:
    fields: dict[str, str]
    input_tokens: int
    output_tokens: int
    cost: float


def token_counts(word_count: int) -> tuple[int, int]:
    return (
        int(round(word_count * INPUT_TOKENS_PER_WORD)),
        int(round(word_count * OUTPUT_TOKENS_PER_WORD)),
    )


def parse_cost(input_tokens: int, output_tokens: int) -> float:
    return input_tokens * PRICE_PER_INPUT_TOKEN + output_tokens * PRICE_PER_OUTPUT_TOKEN


def sample_parse_outcome(
    document_id: str,
    words: Sequence[str],
    schema_fields: Sequence[str],
    true_fields: Mapping[str, str],
    backend: BackendProfile,
    seed: int,
    retry_index: int = 1,
) -> ParseOutcome:
    """Structured fields plus the token/cost accounting for one parse call.

    Deterministic per (document_id, retry_index, seed); the retry index is
    step-local so a resumed run reproduces the original outcome bytes.
    """
    if not words:
        raise EmptyInput("parse: stitched text is empty")
    input_tokens, output_tokens = token_counts(len(words))
    rng = substream(seed, document_id, "-", "parse", "fields", retry_index)
    fields = {name: true_fields.get(name, f"not-found:{name}") for name in schema_fields}
    if fields and rng.random() >= backend.accuracy:
        name = sorted(fields)[rng.randrange(len(fields))]
        fields[name] = f"{fields[name]}#err"
    return ParseOutcome(
        fields=fields,
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        cost=round(parse_cost(input_tokens, output_tokens), 6),
    )


def sample_parse_malformed(document_id: str, seed: int, rate: float, retry_index: int) -> bool:
    """Whether this parse call simulates schema-violating model output."""
    if rate <= 0:
        return False
    if rate >= 1:
        return True
    rng = substream(seed, document_id, "-", "parse", "malformed", retry_index)
    return rng.random() < rate


# --------------------------------------------------------------------------
# Analytic expectations (used for saturation ceilings and default thresholds)
# --------------------------------------------------------------------------

GPU_OPS = ("classify_clip", "ocr", "detect")
API_OPS = ("classify_vlm", "parse")


def expected_step_seconds(
    calibration: CalibrationSet, steps: Sequence[str], pages: int
) -> dict[str, float]:
    """Expected unloaded wall seconds per step for one document (pre-scale)."""
    p = calibration.p_hard
    prof = calibration.profile
    out: dict[str, float] = {}
    for step in steps:
        if step == "classify":
            out[step] = pages * (
                prof("clip").mean_latency + p * prof("vlm_classify").mean_latency
            )
        elif step == "metadata":
            out[step] = prof("detect").mean_latency
        elif step == "ocr":
            out[step] = pages * prof("ocr").mean_latency
        elif step == "stitch":
            out[step] = prof("stitch").mean_latency
        elif step == "parse":
            out[step] = prof("parse").mean_latency
    return out


def expected_doc_seconds(calibration: CalibrationSet, steps: Sequence[str], pages: int) -> float:
    return sum(expected_step_seconds(calibration, steps, pages).values())


def doc_seconds_variance(calibration: CalibrationSet, steps: Sequence[str], pages: int) -> float:
    """Variance of one document's unloaded processing time (pre-scale)."""

    def uvar(profile: BackendProfile) -> float:
        lo, hi = profile.latency
        return (hi - lo) ** 2 / 12.0

    p = calibration.p_hard
    prof = calibration.profile
    var = 0.0
    for step in steps:
        if step == "classify":
            vlm = prof("vlm_classify")
            second_moment = uvar(vlm) + vlm.mean_latency**2
            fallback_var = p * second_moment - (p * vlm.mean_latency) ** 2
            var += pages * (uvar(prof("clip")) + fallback_var)
        elif step == "metadata":
            var += uvar(prof("detect"))
        elif step == "ocr":
            var += pages * uvar(prof("ocr"))
        elif step == "stitch":
            var += uvar(prof("stitch"))
        elif step == "parse":
            var += uvar(prof("parse"))
    return var


def analytic_p99_doc_seconds(
    calibration: CalibrationSet, steps: Sequence[str], pages: int
) -> float:
    mean = expected_doc_seconds(calibration, steps, pages)
    sigma = math.sqrt(doc_seconds_variance(calibration, steps, pages))
    return mean + 2.326 * sigma


def expected_gpu_seconds_per_doc(
    calibration: CalibrationSet, steps: Sequence[str], pages: int
) -> float:
    prof = calibration.profile
    seconds = 0.0
    if "classify" in steps:
        seconds += pages * prof("clip").mean_latency
    if "metadata" in steps:
        seconds += prof("detect").mean_latency
    if "ocr" in steps:
        seconds += pages * prof("ocr").mean_latency
    return seconds


def expected_api_seconds_per_doc(
    calibration: CalibrationSet, steps: Sequence[str], pages: int
) -> float:
    prof = calibration.profile
    seconds = 0.0
    if "classify" in steps:
        seconds += pages * calibration.p_hard * prof("vlm_classify").mean_latency
    if "parse" in steps:
        seconds += prof("parse").mean_latency
    return seconds


def expected_hybrid_cost_per_page(calibration: CalibrationSet) -> float:
    """Expected per-page classification cost of the confidence-gated routing."""
    return calibration.p_hard * calibration.profile("vlm_classify").unit_cost


# --------------------------------------------------------------------------
# Calibration Monte Carlo
# --------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    pages_per_seed: int
    seeds: tuple[int, ...]
    clip_accuracy: float
    vlm_accuracy: float
    hybrid_accuracy: float
    fallback_rate: float
    expected_cost_per_page: float
    empirical_cost_per_page: float
    expected_hybrid_latency: float
    per_seed: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pages_per_seed": self.pages_per_seed,
            "seeds": list(self.seeds),
            "clip_accuracy": self.clip_accuracy,
            "vlm_accuracy": self.vlm_accuracy,
            "hybrid_accuracy": self.hybrid_accuracy,
            "fallback_rate": self.fallback_rate,
            "expected_cost_per_page": self.expected_cost_per_page,
            "empirical_cost_per_page": self.empirical_cost_per_page,
            "expected_hybrid_latency": self.expected_hybrid_latency,
            "per_seed": self.per_seed,
        }


def run_calibration(
    seeds: Sequence[int],
    pages_per_seed: int,
    labels: Sequence[str],
    calibration: Optional[CalibrationSet] = None,
    threshold: float = 0.7,
) -> CalibrationReport:
    """Monte-Carlo reproduction of the classification strategy comparison.

    For each synthetic page the local classifier, the VLM and the hybrid
    routing are all evaluated; accuracies and the fallback rate are averaged
    across seeds.
    """
    calibration = calibration or default_calibration()
    labels = sorted(labels)
    per_seed = []
    for seed in seeds:
        clip_ok = vlm_ok = hybrid_ok = fallbacks = 0
        for i in range(pages_per_seed):
            doc_id = f"cal-{seed}-{i // 8:05d}"
            page_rng = substream(seed, doc_id, i % 8, "page")
            difficulty = "hard" if page_rng.random() < calibration.p_hard else "easy"
            true_label = labels[substream(seed, doc_id, i % 8, "label").randrange(len(labels))]
            page = PagePayload(
                document_id=doc_id,
                page_index=i % 8,
                true_label=true_label,
                difficulty=difficulty,
                words=(),
                fields={},
                is_cover=False,
                metadata={},
            )
            clip = sample_classifier_outcome(page, "clip", seed, labels, calibration)
            vlm = sample_classifier_outcome(page, "vlm_classify", seed, labels, calibration)
            clip_ok += clip.label == true_label
            vlm_ok += vlm.label == true_label
            if clip.confidence > threshold:
                hybrid_ok += clip.label == true_label
            else:
                fallbacks += 1
                hybrid_ok += vlm.label == true_label
        n = pages_per_seed
        per_seed.append(
            {
                "seed": seed,
                "clip_accuracy": clip_ok / n,
                "vlm_accuracy": vlm_ok / n,
                "hybrid_accuracy": hybrid_ok / n,
                "fallback_rate": fallbacks / n,
            }
        )
    k = len(per_seed)
    vlm_profile = calibration.profile("vlm_classify")
    report = CalibrationReport(
        pages_per_seed=pages_per_seed,
        seeds=tuple(seeds),
        clip_accuracy=sum(r["clip_accuracy"] for r in per_seed) / k,
        vlm_accuracy=sum(r["vlm_accuracy"] for r in per_seed) / k,
        hybrid_accuracy=sum(r["hybrid_accuracy"] for r in per_seed) / k,
        fallback_rate=sum(r["fallback_rate"] for r in per_seed) / k,
        expected_cost_per_page=expected_hybrid_cost_per_page(calibration),
        empirical_cost_per_page=(
            sum(r["fallback_rate"] for r in per_seed) / k * vlm_profile.unit_cost
        ),
        expected_hybrid_latency=(
            calibration.profile("clip").mean_latency
            + calibration.p_hard * vlm_profile.mean_latency
        ),
        per_seed=per_seed,
    )
    return report
