from __future__ import annotations

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from lexrag.backends import (
    BackendConfig,
    BackendError,
    MockEmbedder,
    MockGenerator,
    HttpBackend,
    RetryPolicy,
)

# Pinned output of MockEmbedder(dim=8) for "a"; guards cross-process stability.
FROZEN_A = [
    0.226258816573,
    -0.613330712504,
    0.225728070896,
    -0.503755992483,
    0.091208738665,
    -0.323182455177,
    0.390327774006,
    -0.052796008985,
]


def norm(vec):
    return math.sqrt(math.fsum(x * x for x in vec))


class TestMockEmbedder:
    def test_deterministic(self):
        embedder = MockEmbedder(dim=8)
        assert embedder.embed_texts(["hello"]) == embedder.embed_texts(["hello"])

    def test_pinned_value(self):
        vec = MockEmbedder(dim=8).embed_texts(["a"])[0]
        assert vec == pytest.approx(FROZEN_A, abs=1e-9)

    def test_distinct_inputs_distinct_unit_vectors(self):
        vectors = MockEmbedder(dim=8).embed_texts(["a", "b"])
        assert vectors[0] != vectors[1]
        for vec in vectors:
            assert norm(vec) == pytest.approx(1.0, abs=1e-9)

    def test_independent_of_call_order(self):
        one = MockEmbedder(dim=8)
        two = MockEmbedder(dim=8)
        one.embed_texts(["noise", "more noise"])
        assert one.embed_texts(["target"]) == two.embed_texts(["target"])

    def test_embed_tokens(self):
        vectors = MockEmbedder(dim=8).embed_tokens(["the", "cat"])
        assert len(vectors) == 2
        assert all(norm(v) == pytest.approx(1.0, abs=1e-9) for v in vectors)

    def test_identical_token_lists_identical_vectors(self):
        embedder = MockEmbedder(dim=8)
        assert embedder.embed_tokens(["x", "y"]) == embedder.embed_tokens(["x", "y"])

    def test_empty_inputs_rejected(self):
        embedder = MockEmbedder(dim=8)
        with pytest.raises(ValueError):
            embedder.embed_texts([])
        with pytest.raises(ValueError):
            embedder.embed_tokens([])

    def test_call_counter(self):
        embedder = MockEmbedder(dim=8)
        embedder.embed_texts(["a", "b"])
        embedder.embed_texts(["c"])
        assert embedder.calls == 2


class TestMockGenerator:
    def test_echoes_glossary_targets_in_order(self):
        prompt = "Intro\n\nGlossary:\nwater → ᎠᎹ\nsun → ᏅᏓ\n\nTranslate.\nthe water sun"
        result = MockGenerator().generate(prompt)
        assert result.text == "ᎠᎹ ᏅᏓ"
        assert result.model_id == "mock-gen"

    def test_no_glossary_marker(self):
        result = MockGenerator().generate("Translate.\nhello")
        assert result.text == "⟨no-entries⟩"

    def test_deterministic(self):
        prompt = "Glossary:\na → b\n\nTranslate.\na"
        assert MockGenerator().generate(prompt) == MockGenerator().generate(prompt)


class _ScriptedHandler(BaseHTTPRequestHandler):
    """Serves scripted status codes, records requests and peak concurrency."""

    server_version = "stub"

    def do_POST(self):
        with self.server.lock:
            self.server.in_flight += 1
            self.server.peak_in_flight = max(self.server.peak_in_flight, self.server.in_flight)
        try:
            if self.server.handler_delay:
                import time

                time.sleep(self.server.handler_delay)
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length) or b"{}")
            with self.server.lock:
                self.server.requests.append(
                    {
                        "path": self.path,
                        "payload": payload,
                        "auth": self.headers.get("Authorization"),
                    }
                )
                script = self.server.script
                status = script.pop(0) if script else 200
            if status != 200:
                body = json.dumps({"error": "scripted"}).encode()
                self.send_response(status)
            else:
                body = json.dumps(self.server.respond(self.path, payload)).encode()
                self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        finally:
            with self.server.lock:
                self.server.in_flight -= 1

    def log_message(self, *args):
        pass


def _default_respond(path, payload):
    if path.endswith("/embeddings"):
        dim = 4
        return {"data": [{"embedding": [float(len(t))] + [1.0] * (dim - 1)} for t in payload["input"]]}
    return {
        "choices": [{"message": {"content": "ᎠᎹ ᎤᏓᏅᏘ  "}}],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3},
    }


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    server.lock = threading.Lock()
    server.requests = []
    server.script = []
    server.in_flight = 0
    server.peak_in_flight = 0
    server.handler_delay = 0.0
    server.respond = _default_respond
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        thread.join(timeout=5)


def _config(server, **overrides) -> BackendConfig:
    host, port = server.server_address
    defaults = dict(
        base_url=f"http://{host}:{port}",
        api_key_env="LEXRAG_TEST_KEY",
        retry=RetryPolicy(max_attempts=3, initial_backoff_ms=1, multiplier=2.0),
        timeout_s=5.0,
    )
    defaults.update(overrides)
    return BackendConfig(**defaults)


class TestHttpBackend:
    def test_embeddings_round_trip(self, stub_server):
        backend = HttpBackend(_config(stub_server))
        vectors = backend.embed_texts(["ab", "xyz"])
        assert vectors == [[2.0, 1.0, 1.0, 1.0], [3.0, 1.0, 1.0, 1.0]]
        request = stub_server.requests[0]
        assert request["path"] == "/embeddings"
        assert request["payload"]["input"] == ["ab", "xyz"]

    def test_generate_returns_canned_text_rstripped(self, stub_server):
        backend = HttpBackend(_config(stub_server))
        result = backend.generate("translate this")
        assert result.text == "ᎠᎹ ᎤᏓᏅᏘ"
        assert result.model_id == backend.config.chat_model_id
        assert result.prompt_tokens == 7 and result.completion_tokens == 3
        payload = stub_server.requests[0]["payload"]
        assert payload["messages"] == [{"role": "user", "content": "translate this"}]

    def test_bearer_token_from_environment(self, stub_server, monkeypatch):
        monkeypatch.setenv("LEXRAG_TEST_KEY", "sekrit")
        backend = HttpBackend(_config(stub_server))
        backend.generate("x")
        assert stub_server.requests[0]["auth"] == "Bearer sekrit"

    def test_retry_on_429_succeeds_third_attempt(self, stub_server):
        stub_server.script = [429, 429]
        backend = HttpBackend(_config(stub_server))
        assert backend.embed_texts(["q"]) == [[1.0, 1.0, 1.0, 1.0]]
        assert len(stub_server.requests) == 3

    def test_non_retryable_4xx_fails_immediately(self, stub_server):
        stub_server.script = [404]
        backend = HttpBackend(_config(stub_server))
        with pytest.raises(BackendError, match="404"):
            backend.embed_texts(["q"])
        assert len(stub_server.requests) == 1

    def test_retries_exhausted(self, stub_server):
        stub_server.script = [500, 500, 500]
        backend = HttpBackend(_config(stub_server))
        with pytest.raises(BackendError, match="after 3 attempts"):
            backend.generate("x")
        assert len(stub_server.requests) == 3

    def test_transport_error_retried_then_raised(self, stub_server):
        # close the server so connections are refused
        host, port = stub_server.server_address
        stub_server.shutdown()
        stub_server.server_close()
        backend = HttpBackend(
            BackendConfig(
                base_url=f"http://{host}:{port}",
                retry=RetryPolicy(max_attempts=2, initial_backoff_ms=1),
                timeout_s=0.5,
            )
        )
        with pytest.raises(BackendError, match="after 2 attempts"):
            backend.embed_texts(["q"])

    def test_in_flight_bounded(self, stub_server):
        stub_server.handler_delay = 0.05
        backend = HttpBackend(_config(stub_server, max_in_flight=2))
        threads = [
            threading.Thread(target=lambda: backend.embed_texts(["t"])) for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(stub_server.requests) == 8
        assert stub_server.peak_in_flight <= 2

    def test_malformed_response_payload(self, stub_server):
        stub_server.respond = lambda path, payload: {"unexpected": True}
        backend = HttpBackend(_config(stub_server))
        with pytest.raises(BackendError, match="malformed"):
            backend.embed_texts(["q"])
