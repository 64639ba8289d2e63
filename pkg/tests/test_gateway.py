import json
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from climate_scenarios.errors import (
    ArtifactIOError,
    BackendStatusError,
    BackendTimeout,
    ConfigError,
    DimensionDriftError,
    MalformedPayloadError,
    ReplayMissError,
    ValidationError,
)
from climate_scenarios.gateway import (
    GenerationRequest,
    GenerationResponse,
    ModelGateway,
    ModelRef,
    request_hash,
)
from climate_scenarios.jsonl import canonical_json, sha256_text

URL = "http://model-server.test:11434"
GEN = ModelRef(URL, "llama3.2:3b", "generator")
EMB = ModelRef(URL, "nomic-embed-text", "embedder")


class FakeServer:
    """Counts requests; answers generate/embeddings deterministically."""

    def __init__(self, dim=4, fail_times=0, status=503):
        self.calls = []
        self.dim = dim
        self.fail_times = fail_times
        self.status = status

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.calls.append((request.url.path, body))
        if self.fail_times:
            self.fail_times -= 1
            return httpx.Response(self.status, text="busy")
        if request.url.path == "/api/generate":
            return httpx.Response(200, json={"response": f"echo:{body['prompt']}", "prompt_eval_count": 3, "eval_count": 5})
        if request.url.path == "/api/embeddings":
            return httpx.Response(200, json={"embedding": [float(len(body["prompt"]) + i) for i in range(self.dim)]})
        return httpx.Response(404)

    def client(self):
        return httpx.Client(transport=httpx.MockTransport(self))


def no_sleep(_):
    pass


def test_model_ref_validation():
    with pytest.raises(ValidationError):
        ModelRef("localhost", "m", "generator")
    with pytest.raises(ValidationError):
        ModelRef(URL, "", "generator")
    with pytest.raises(ValidationError):
        ModelRef(URL, "m", "oracle")


def test_request_validation():
    with pytest.raises(ValidationError):
        GenerationRequest(prompt=" ")
    with pytest.raises(ValidationError):
        GenerationRequest(prompt="x", temperature=-0.1)


def test_hash_ignores_field_order():
    a = {"prompt": "p", "system": "s", "temperature": 0.0}
    b = {"temperature": 0.0, "system": "s", "prompt": "p"}
    assert request_hash("generate", "m", a) == request_hash("generate", "m", b)
    assert request_hash("generate", "m", a) != request_hash("generate", "m2", a)


def test_live_generate_sends_wire_fields():
    server = FakeServer()
    gw = ModelGateway("live", client=server.client())
    req = GenerationRequest(prompt="Q", system="S", context_blocks=("c1", "c2"), seed=7, max_tokens=99)
    resp = gw.generate(GEN, req)
    path, body = server.calls[0]
    assert path == "/api/generate"
    assert body["model"] == "llama3.2:3b"
    assert body["system"] == "S"
    assert body["prompt"] == "c1\n\nc2\n\nQ"
    assert body["options"] == {"temperature": 0.0, "seed": 7, "num_predict": 99}
    assert resp.text == "echo:c1\n\nc2\n\nQ"
    assert (resp.prompt_tokens, resp.completion_tokens) == (3, 5)


def test_embed_role_and_empty_text_checked_before_network():
    server = FakeServer()
    gw = ModelGateway("live", client=server.client())
    with pytest.raises(ValidationError):
        gw.embed_text(EMB, "")
    with pytest.raises(ValidationError):
        gw.embed_text(GEN, "text")
    with pytest.raises(ValidationError):
        gw.generate(EMB, GenerationRequest(prompt="x"))
    assert server.calls == []


def test_same_text_embedded_once_per_session():
    server = FakeServer()
    gw = ModelGateway("live", client=server.client())
    assert gw.embed_text(EMB, "abc") == gw.embed_text(EMB, "abc")
    assert len(server.calls) == 1


def test_record_then_replay_without_network(tmp_path):
    cassette = tmp_path / "c.jsonl"
    server = FakeServer(dim=768)
    with ModelGateway("record", cassette, client=server.client()) as gw:
        live_text = gw.generate(GEN, GenerationRequest(prompt="hello")).text
        live_vec = gw.embed_text(EMB, "hello")
    assert len(cassette.read_text().splitlines()) == 2

    silent = FakeServer()
    gw = ModelGateway("replay", cassette, client=silent.client())
    assert gw.generate(GEN, GenerationRequest(prompt="hello")).text == live_text
    vec = gw.embed_text(EMB, "hello")
    assert vec == live_vec and vec.dim == 768
    assert silent.calls == []


def test_replay_miss_names_hash(tmp_path):
    cassette = tmp_path / "c.jsonl"
    cassette.write_text("")
    gw = ModelGateway("replay", cassette)
    req = GenerationRequest(prompt="unseen")
    payload = {"prompt": "unseen", "system": "", "context_blocks": [], "temperature": 0.0, "seed": 0, "max_tokens": 2048}
    expected = sha256_text(canonical_json({"kind": "generate", "model": GEN.model_name, "request": payload}))
    with pytest.raises(ReplayMissError) as info:
        gw.generate(GEN, req)
    assert info.value.request_hash == expected
    assert expected in str(info.value)


def test_replay_requires_readable_cassette(tmp_path):
    with pytest.raises(ArtifactIOError):
        ModelGateway("replay", tmp_path / "missing.jsonl")
    with pytest.raises(ConfigError):
        ModelGateway("replay")


def test_record_unwritable_path_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ArtifactIOError):
        ModelGateway("record", blocker / "c.jsonl")


def test_retry_budget_then_success():
    server = FakeServer(fail_times=2)
    delays = []
    gw = ModelGateway("live", client=server.client(), max_retries=3, sleep=delays.append, backoff_base=1.0, backoff_cap=1.5)
    assert gw.generate(GEN, GenerationRequest(prompt="x")).text == "echo:x"
    assert len(server.calls) == 3
    assert delays == [1.0, 1.5]


def test_retry_budget_exhausted_surfaces_last_error():
    server = FakeServer(fail_times=10)
    gw = ModelGateway("live", client=server.client(), max_retries=3, sleep=no_sleep)
    with pytest.raises(BackendStatusError) as info:
        gw.generate(GEN, GenerationRequest(prompt="x"))
    assert info.value.status_code == 503
    assert len(server.calls) == 3


def test_client_errors_not_retried():
    server = FakeServer(fail_times=10, status=404)
    gw = ModelGateway("live", client=server.client(), sleep=no_sleep)
    with pytest.raises(BackendStatusError):
        gw.generate(GEN, GenerationRequest(prompt="x"))
    assert len(server.calls) == 1


def test_timeout_is_distinguishable():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    gw = ModelGateway("live", client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=no_sleep)
    with pytest.raises(BackendTimeout):
        gw.generate(GEN, GenerationRequest(prompt="x"))


def test_malformed_payload():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"text": 1})))
    gw = ModelGateway("live", client=client)
    with pytest.raises(MalformedPayloadError):
        gw.generate(GEN, GenerationRequest(prompt="x"))
    with pytest.raises(MalformedPayloadError):
        gw.embed_text(EMB, "x")


def test_dimension_drift_detected():
    dims = iter([3, 5])

    def handler(request):
        return httpx.Response(200, json={"embedding": [1.0] * next(dims)})

    gw = ModelGateway("live", client=httpx.Client(transport=httpx.MockTransport(handler)))
    gw.embed_text(EMB, "a")
    with pytest.raises(DimensionDriftError):
        gw.embed_text(EMB, "b")


def test_in_flight_limit_respected():
    import threading
    import time

    active = 0
    peak = 0
    lock = threading.Lock()

    def handler(request):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        time.sleep(0.02)
        with lock:
            active -= 1
        return httpx.Response(200, json={"response": "ok"})

    gw = ModelGateway("live", client=httpx.Client(transport=httpx.MockTransport(handler)), max_in_flight=2)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: gw.generate(GEN, GenerationRequest(prompt=f"p{i}")), range(12)))
    assert peak <= 2


def test_generation_response_from_cassette_keeps_latency(tmp_path):
    cassette = tmp_path / "c.jsonl"
    server = FakeServer()
    ModelGateway("record", cassette, client=server.client()).generate(GEN, GenerationRequest(prompt="x"))
    rec = json.loads(cassette.read_text())
    assert set(rec) == {"request_hash", "kind", "model", "response", "recorded_at"}
    replayed = ModelGateway("replay", cassette).generate(GEN, GenerationRequest(prompt="x"))
    assert replayed == GenerationResponse(**rec["response"])
