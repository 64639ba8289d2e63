import re
import httpx
import pytest

from climate_scenarios.gateway import ModelGateway, ModelRef
from climate_scenarios.index import EmbeddingIndex, EmbeddingVector, IndexEntry
from climate_scenarios.testing import ScriptedBackend, hashed_embedding

URL = "http://scripted.test:11434"

CHUNKS = {
    "cop21:00000": "Parties agree to scale up renewable energy deployment and grid integration with finance support.",
    "cop21:00001": "Developed countries provide climate finance and technology transfer to developing country Parties.",
    "kp:00000": "Emissions trading and clean development mechanism projects generate certified emission reductions.",
    "conv:00000": "Adaptation planning, capacity building and institutional arrangements for vulnerable communities.",
    "conv:00001": "Forests, land use and afforestation contribute to carbon sequestration and livelihoods.",
}


@pytest.fixture
def models():
    return {
        "generator": ModelRef(URL, "llama3.2:3b", "generator"),
        "followup": ModelRef(URL, "llama3:8b", "followup_generator"),
        "judge": ModelRef(URL, "gemma2:2b", "judge"),
        "embedder": ModelRef(URL, "nomic-embed-text", "embedder"),
    }


@pytest.fixture
def small_index():
    return EmbeddingIndex.from_entries(
        IndexEntry(cid, EmbeddingVector(tuple(hashed_embedding(text))), text) for cid, text in CHUNKS.items()
    )


@pytest.fixture
def backend():
    return ScriptedBackend()


@pytest.fixture
def gateway(backend):
    return ModelGateway("live", client=backend.client(), sleep=lambda _: None)


def scripted_gateway(reply_fn, embed_fn=hashed_embedding, max_retries=1):
    """Live-mode gateway whose generate replies come from ``reply_fn(body)``."""
    calls = []

    def handler(request):
        import json

        body = json.loads(request.content)
        calls.append(body)
        if request.url.path == "/api/embeddings":
            return httpx.Response(200, json={"embedding": list(embed_fn(body["prompt"]))})
        reply = reply_fn(body)
        if isinstance(reply, httpx.Response):
            return reply
        return httpx.Response(200, json={"response": reply})

    gw = ModelGateway("live", client=httpx.Client(transport=httpx.MockTransport(handler)), max_retries=max_retries, sleep=lambda _: None)
    gw.calls = calls
    return gw


# -- acceptance summary: one line per criterion ---------------------------------

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif "failed" in results:
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n} ({title}): {status}")
