import base64

import httpx
import pytest
from fastapi.testclient import TestClient

from docflow.domain import StatusKind
from docflow.gateway_http import build_gateway_app
from docflow.inference_http import HttpInferenceClient, build_inference_app
from docflow.runtime import build_system

from conftest import make_corpus

SCALE = 0.01


@pytest.fixture
def seeded(config, tmp_path):
    system = build_system(config, seed=70, time_scale=SCALE, root=tmp_path)
    corpus = make_corpus(config, 2, seed=70)
    for gd in corpus:
        for page in gd.pages:
            system.blobs.put_blob(page.ref.blob_key, page.payload())
    yield system, corpus
    system.shutdown()


class TestInferenceEndpoints:
    def test_classify_clip_ok(self, seeded):
        system, corpus = seeded
        client = TestClient(build_inference_app(system.inference))
        response = client.post(
            "/v1/classify/clip", json={"page_key": corpus[0].pages[0].ref.blob_key}
        )
        assert response.status_code == 200
        body = response.json()
        assert body["label"] in system.config.doc_types
        assert 0 <= body["confidence"] <= 1
        assert body["timing"]["finished_at"] >= body["timing"]["started_at"]

    def test_missing_blob_404(self, seeded):
        system, _ = seeded
        client = TestClient(build_inference_app(system.inference))
        assert client.post("/v1/ocr", json={"page_key": "pages/ghost/0"}).status_code == 404

    def test_empty_parse_422(self, seeded):
        system, _ = seeded
        client = TestClient(build_inference_app(system.inference))
        response = client.post(
            "/v1/parse",
            json={"document_id": "d", "text_words": [], "schema_fields": ["total"]},
        )
        assert response.status_code == 422

    def test_non_cover_detect_422(self, seeded):
        system, corpus = seeded
        client = TestClient(build_inference_app(system.inference))
        response = client.post(
            "/v1/detect", json={"page_key": corpus[0].pages[4].ref.blob_key}
        )
        assert response.status_code == 422

    def test_stats_endpoint(self, seeded):
        system, corpus = seeded
        client = TestClient(build_inference_app(system.inference))
        client.post("/v1/ocr", json={"page_key": corpus[0].pages[0].ref.blob_key})
        stats = client.get("/v1/stats").json()
        assert stats["per_op"]["ocr"]["count"] == 1
        assert stats["in_flight"] == 0

    def test_http_client_contract_matches_in_process(self, seeded):
        system, corpus = seeded
        app = build_inference_app(system.inference)
        http_client = HttpInferenceClient(client=TestClient(app))
        key = corpus[0].pages[0].ref.blob_key
        via_http = http_client.ocr_page(key)
        direct = system.inference.ocr_page(key)
        assert via_http.words == direct.words
        assert via_http.page_index == direct.page_index
        http_client.close()

    def test_http_client_maps_errors(self, seeded):
        from docflow.store import NotFound
        from docflow.worldgen import EmptyInput

        system, _ = seeded
        app = build_inference_app(system.inference)
        client = HttpInferenceClient(client=TestClient(app))
        with pytest.raises(NotFound):
            client.ocr_page("pages/ghost/0")
        with pytest.raises(EmptyInput):
            client.parse_document("d", [], ["total"])
        client.close()


class TestWorkerOverHttpInference:
    def test_document_completes_through_http_boundary(self, config, tmp_path):
        backing = build_system(config, seed=71, time_scale=SCALE, root=tmp_path)
        app = build_inference_app(backing.inference)
        http_client = HttpInferenceClient(client=TestClient(app))
        system = build_system(
            config,
            seed=71,
            time_scale=SCALE,
            root=tmp_path,
            inference_client=http_client,
        )
        # both systems share one store root; the worker talks HTTP only
        system.inference = backing.inference
        try:
            system.start_pods(total_tasks=2)
            ids = system.submit_corpus(make_corpus(config, 2, seed=71))
            system.wait_quiescent(ids, timeout=60)
            system.stop_pods()
            for i in ids:
                assert system.tracking.get(i).status.kind is StatusKind.COMPLETED
        finally:
            http_client.close()
            system.shutdown()
            backing.shutdown()


class TestGatewayEndpoints:
    def test_submit_and_status(self, config, tmp_path):
        system = build_system(config, seed=72, time_scale=SCALE, root=tmp_path)
        try:
            client = TestClient(build_gateway_app(system.gateway))
            corpus = make_corpus(config, 1, seed=72)
            pages = [
                {"payload_b64": base64.b64encode(p.payload()).decode()}
                for p in corpus[0].pages
            ]
            response = client.post(
                "/documents", json={"pages": pages, "doc_type": "invoice"}
            )
            assert response.status_code == 201
            doc_id = response.json()["document_id"]
            status = client.get(f"/documents/{doc_id}/status")
            assert status.status_code == 200
            assert status.json()["status"]["kind"] == "queued"
            assert client.get("/documents/ghost/status").status_code == 404
            assert client.get("/healthz").json() == {"ok": True}
        finally:
            system.shutdown()

    def test_validation_and_closed_codes(self, config, tmp_path):
        system = build_system(config, seed=73, time_scale=SCALE, root=tmp_path)
        try:
            client = TestClient(build_gateway_app(system.gateway))
            bad = client.post(
                "/documents", json={"pages": [{"text": "x"}], "doc_type": "mystery"}
            )
            assert bad.status_code == 400
            system.gateway.stop()
            closed = client.post(
                "/documents", json={"pages": [{"text": "x"}], "doc_type": "invoice"}
            )
            assert closed.status_code == 503
            assert client.get("/healthz").json() == {"ok": False}
        finally:
            system.shutdown()
