"""HTTP surface for the gateway.

``POST /documents`` takes a JSON manifest body (base64 or text page
payloads); ``GET /documents/{id}/status`` returns the canonical status
record; ``GET /healthz`` is a liveness probe.

Status codes: 201 created, 200 ok, 400 validation, 404 unknown id,
503 gateway closed / storage failure.
"""

from __future__ import annotations

import base64
from typing import Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .gateway import GatewayClosed, GatewayService, StorageError, Submission, ValidationError
from .store import NotFound


class PageBody(BaseModel):
    text: Optional[str] = None
    payload_b64: Optional[str] = None


class SubmitBody(BaseModel):
    pages: list[PageBody]
    doc_type: Optional[str] = None
    document_id: Optional[str] = None
    idempotency_key: Optional[str] = None


def build_gateway_app(gateway: GatewayService) -> FastAPI:
    app = FastAPI(title="docflow gateway")

    @app.exception_handler(ValidationError)
    def _validation(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(NotFound)
    def _not_found(request, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(GatewayClosed)
    def _closed(request, exc):
        return JSONResponse(status_code=503, content={"error": str(exc)})

    @app.exception_handler(StorageError)
    def _storage(request, exc):
        return JSONResponse(status_code=503, content={"error": str(exc)})

    @app.post("/documents", status_code=201)
    def submit(body: SubmitBody):
        pages: list[bytes] = []
        for page in body.pages:
            if page.payload_b64 is not None:
                pages.append(base64.b64decode(page.payload_b64))
            elif page.text is not None:
                pages.append(page.text.encode("utf-8"))
            else:
                raise ValidationError("page needs text or payload_b64")
        document_id = gateway.submit(
            Submission(
                pages=pages,
                doc_type=body.doc_type,
                document_id=body.document_id,
                idempotency_key=body.idempotency_key,
            )
        )
        return {"document_id": document_id}

    @app.get("/documents/{document_id}/status")
    def status(document_id: str):
        return gateway.get_status(document_id)

    @app.get("/healthz")
    def healthz():
        return {"ok": not gateway.closed}

    return app
