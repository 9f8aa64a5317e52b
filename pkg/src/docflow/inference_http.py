"""HTTP surface for the inference service, and the matching client.

The service runs in-process by default; this module lets the same service be
deployed as a separate process behind ``POST /v1/...`` endpoints. Workers use
:class:`HttpInferenceClient`, which implements the same contract as the
in-process client.

Status codes: 200 success, 404 NotFound, 422 SchemaViolation/EmptyInput,
503 Overloaded.
"""

from __future__ import annotations

from typing import Optional, Sequence

import httpx
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .inference import (
    ClipResult,
    DetectResult,
    InferenceService,
    InferenceUnavailable,
    NotACoverPage,
    OcrResult,
    Overloaded,
    ParseResult,
    RequestTiming,
    SchemaViolation,
    VlmClassifyResult,
)
from .store import NotFound
from .worldgen import EmptyInput, OcrWord


class PageRequest(BaseModel):
    page_key: str


class DetectRequest(BaseModel):
    page_key: str
    backend: str = "detector"


class ParseRequest(BaseModel):
    document_id: str
    text_words: list[str]
    schema_fields: list[str]
    retry_index: int = 1


def _timing_dict(timing: RequestTiming) -> dict:
    return {
        "queued_at": timing.queued_at,
        "started_at": timing.started_at,
        "finished_at": timing.finished_at,
    }


def build_inference_app(service: InferenceService) -> FastAPI:
    app = FastAPI(title="docflow inference service")

    @app.exception_handler(NotFound)
    def _not_found(request, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(NotACoverPage)
    def _not_cover(request, exc):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(SchemaViolation)
    def _schema(request, exc):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(EmptyInput)
    def _empty(request, exc):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(Overloaded)
    def _overloaded(request, exc):
        return JSONResponse(status_code=503, content={"error": str(exc)})

    @app.post("/v1/classify/clip")
    def classify_clip(body: PageRequest):
        result = service.classify_clip(body.page_key)
        return {
            "label": result.label,
            "confidence": result.confidence,
            "cost": result.cost,
            "timing": _timing_dict(result.timing),
        }

    @app.post("/v1/classify/vlm")
    def classify_vlm(body: PageRequest):
        result = service.classify_vlm(body.page_key)
        return {
            "label": result.label,
            "cost": result.cost,
            "timing": _timing_dict(result.timing),
        }

    @app.post("/v1/ocr")
    def ocr(body: PageRequest):
        result = service.ocr_page(body.page_key)
        return {
            "page_index": result.page_index,
            "words": [
                {"text": w.text, "box": list(w.box), "confidence": w.confidence}
                for w in result.words
            ],
            "timing": _timing_dict(result.timing),
        }

    @app.post("/v1/detect")
    def detect(body: DetectRequest):
        result = service.detect_metadata(body.page_key, body.backend)
        return {
            "metadata": result.metadata,
            "backend": result.backend,
            "cost": result.cost,
            "timing": _timing_dict(result.timing),
        }

    @app.post("/v1/parse")
    def parse(body: ParseRequest):
        result = service.parse_document(
            body.document_id, body.text_words, body.schema_fields, retry_index=body.retry_index
        )
        return {
            "fields": result.fields,
            "input_tokens": result.input_tokens,
            "output_tokens": result.output_tokens,
            "cost": result.cost,
            "timing": _timing_dict(result.timing),
        }

    @app.get("/v1/stats")
    def stats():
        s = service.service_stats()
        return {
            "in_flight": s.in_flight,
            "queue_length": s.queue_length,
            "slot_utilization": s.slot_utilization,
            "api_utilization": s.api_utilization,
            "per_op": {
                op: {"count": body["count"]} for op, body in s.per_op.items()
            },
        }

    return app


def _parse_timing(body: dict) -> RequestTiming:
    t = body["timing"]
    return RequestTiming(t["queued_at"], t["started_at"], t["finished_at"])


class HttpInferenceClient:
    """InferenceClient over HTTP. Pass ``client`` to reuse an existing
    httpx.Client (e.g. a TestClient bound to an ASGI app), or ``base_url``
    for a live server."""

    def __init__(
        self,
        base_url: str = "http://inference",
        client: Optional[httpx.Client] = None,
        timeout: float = 300.0,
    ) -> None:
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        try:
            response = self._client.post(path, json=body)
        except httpx.TransportError as exc:
            raise InferenceUnavailable(str(exc)) from exc
        if response.status_code == 404:
            raise NotFound(response.json().get("error", "not found"))
        if response.status_code == 422:
            message = response.json().get("error", "unprocessable")
            if "empty" in message:
                raise EmptyInput(message)
            if "cover page" in message:
                raise NotACoverPage(message)
            raise SchemaViolation(message)
        if response.status_code == 503:
            raise Overloaded(response.json().get("error", "overloaded"))
        response.raise_for_status()
        return response.json()

    def classify_clip(self, page_key: str) -> ClipResult:
        body = self._post("/v1/classify/clip", {"page_key": page_key})
        return ClipResult(body["label"], body["confidence"], _parse_timing(body), body["cost"])

    def classify_vlm(self, page_key: str) -> VlmClassifyResult:
        body = self._post("/v1/classify/vlm", {"page_key": page_key})
        return VlmClassifyResult(body["label"], _parse_timing(body), body["cost"])

    def ocr_page(self, page_key: str) -> OcrResult:
        body = self._post("/v1/ocr", {"page_key": page_key})
        words = tuple(
            OcrWord(w["text"], tuple(w["box"]), w["confidence"]) for w in body["words"]
        )
        return OcrResult(body["page_index"], words, _parse_timing(body))

    def detect_metadata(self, page_key: str, backend: str = "detector") -> DetectResult:
        body = self._post("/v1/detect", {"page_key": page_key, "backend": backend})
        return DetectResult(body["metadata"], body["backend"], _parse_timing(body), body["cost"])

    def parse_document(
        self,
        document_id: str,
        text_words: Sequence[str],
        schema: Sequence[str],
        true_fields: Optional[dict] = None,
        retry_index: int = 1,
    ) -> ParseResult:
        body = self._post(
            "/v1/parse",
            {
                "document_id": document_id,
                "text_words": list(text_words),
                "schema_fields": list(schema),
                "retry_index": retry_index,
            },
        )
        return ParseResult(
            body["fields"],
            body["input_tokens"],
            body["output_tokens"],
            body["cost"],
            _parse_timing(body),
        )
