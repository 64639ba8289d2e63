"""Model backend access with record/replay cassettes.

Three modes:

* ``live``   -- every call goes to the backend over HTTP.
* ``record`` -- live calls, and each new request/response pair is appended
  to the cassette.
* ``replay`` -- answers come only from the cassette; no HTTP client exists.

Requests are identified by the SHA-256 of their canonical JSON form (sorted
keys), so field order never changes the hash.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Literal
from urllib.parse import urlparse

import httpx

from .errors import (
    ArtifactIOError,
    BackendConnectionError,
    BackendError,
    BackendStatusError,
    BackendTimeout,
    ConfigError,
    DimensionDriftError,
    MalformedPayloadError,
    ReplayMissError,
    ValidationError,
)
from .index import EmbeddingVector
from .jsonl import append_jsonl, canonical_json, iter_jsonl, sha256_text

log = logging.getLogger(__name__)

BACKEND_URL_ENV = "CPSG_BACKEND_URL"
DEFAULT_BACKEND_URL = "http://localhost:11434"
ROLES = ("generator", "followup_generator", "judge", "embedder")
GENERATION_ROLES = frozenset({"generator", "followup_generator", "judge"})
Mode = Literal["live", "record", "replay"]


def default_backend_url() -> str:
    return os.environ.get(BACKEND_URL_ENV, DEFAULT_BACKEND_URL)


@dataclass(frozen=True)
class ModelRef:
    backend_url: str
    model_name: str
    role: str

    def __post_init__(self) -> None:
        parsed = urlparse(self.backend_url)
        if not (parsed.scheme and parsed.netloc):
            raise ValidationError(f"backend_url must be an absolute URL, got {self.backend_url!r}")
        if not self.model_name:
            raise ValidationError("model_name must be non-empty")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    system: str = ""
    context_blocks: tuple[str, ...] = ()
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValidationError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")
        object.__setattr__(self, "context_blocks", tuple(self.context_blocks))

    def user_text(self) -> str:
        return "\n\n".join((*self.context_blocks, self.prompt))


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0


@dataclass(frozen=True)
class TranscriptRecord:
    request_hash: str
    kind: str
    model: str
    response: dict
    recorded_at: str


def request_hash(kind: str, model_name: str, payload: dict) -> str:
    return sha256_text(canonical_json({"kind": kind, "model": model_name, "request": payload}))


def _generation_payload(req: GenerationRequest) -> dict:
    d = asdict(req)
    d["context_blocks"] = list(req.context_blocks)
    return d


class OllamaAdapter:
    """Speaks the local-model-server REST convention (``/api/generate``, ``/api/embeddings``)."""

    name = "ollama"

    def generate(self, client: httpx.Client, model: ModelRef, req: GenerationRequest) -> GenerationResponse:
        body = {
            "model": model.model_name,
            "system": req.system,
            "prompt": req.user_text(),
            "stream": False,
            "options": {"temperature": req.temperature, "seed": req.seed, "num_predict": req.max_tokens},
        }
        data = _post(client, model.backend_url.rstrip("/") + "/api/generate", body)
        text = data.get("response")
        if not isinstance(text, str):
            raise MalformedPayloadError("generate reply has no 'response' string")
        return GenerationResponse(
            text=text,
            prompt_tokens=int(data.get("prompt_eval_count") or 0),
            completion_tokens=int(data.get("eval_count") or 0),
        )

    def embed(self, client: httpx.Client, model: ModelRef, text: str) -> list[float]:
        data = _post(client, model.backend_url.rstrip("/") + "/api/embeddings", {"model": model.model_name, "prompt": text})
        values = data.get("embedding")
        if not isinstance(values, list) or not values or not all(isinstance(v, (int, float)) for v in values):
            raise MalformedPayloadError("embeddings reply has no numeric 'embedding' list")
        return [float(v) for v in values]


ADAPTERS = {"ollama": OllamaAdapter}


def _post(client: httpx.Client, url: str, body: dict) -> dict:
    try:
        resp = client.post(url, json=body)
    except httpx.TimeoutException as exc:
        raise BackendTimeout(f"timeout calling {url}") from exc
    except httpx.HTTPError as exc:
        raise BackendConnectionError(f"cannot reach {url}: {exc}") from exc
    if resp.status_code >= 300:
        raise BackendStatusError(resp.status_code, resp.text)
    try:
        data = resp.json()
    except ValueError as exc:
        raise MalformedPayloadError(f"non-JSON reply from {url}") from exc
    if not isinstance(data, dict):
        raise MalformedPayloadError(f"reply from {url} is not a JSON object")
    return data


def _retryable(exc: BackendError) -> bool:
    if isinstance(exc, BackendStatusError):
        return exc.status_code >= 500 or exc.status_code in (408, 429)
    return isinstance(exc, (BackendTimeout, BackendConnectionError))


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class GatewayStats:
    network_calls: int = 0
    replay_hits: int = 0
    cache_hits: int = 0


class ModelGateway:
    def __init__(
        self,
        mode: Mode = "live",
        cassette_path: str | os.PathLike | None = None,
        *,
        client: httpx.Client | None = None,
        adapter: OllamaAdapter | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_in_flight: int = 4,
        timeout: float = 300.0,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], str] = _utcnow,
    ) -> None:
        if max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.adapter = adapter or OllamaAdapter()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.sleep = sleep
        self.clock = clock
        self.stats = GatewayStats()
        self._external_client = client
        self._timeout = timeout
        self._client: httpx.Client | None = None
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._embed_cache: dict[str, EmbeddingVector] = {}
        self._dims: dict[str, int] = {}
        self._cassette: dict[str, TranscriptRecord] = {}
        self._cassette_path: Path | None = None
        self.mode: Mode = "live"
        if mode == "record":
            self.record_session(_require_cassette(mode, cassette_path))
        elif mode == "replay":
            self.replay_session(_require_cassette(mode, cassette_path))
        elif mode != "live":
            raise ConfigError(f"unknown mode {mode!r}")

    # -- mode switches ----------------------------------------------------

    def record_session(self, path: str | os.PathLike) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
        except OSError as exc:
            raise ArtifactIOError(f"cassette not writable: {path}: {exc}") from exc
        self._cassette = _load_cassette(path)
        self._cassette_path = path
        self.mode = "record"

    def replay_session(self, path: str | os.PathLike) -> None:
        path = Path(path)
        if not path.is_file():
            raise ArtifactIOError(f"cassette not readable: {path}")
        self._cassette = _load_cassette(path)
        self._cassette_path = path
        self.mode = "replay"

    def close(self) -> None:
        if self._client is not None and self._external_client is None:
            self._client.close()
        self._client = None

    def __enter__(self) -> ModelGateway:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    # -- public calls -----------------------------------------------------

    def generate(self, model: ModelRef, req: GenerationRequest) -> GenerationResponse:
        if model.role not in GENERATION_ROLES:
            raise ValidationError(f"model role {model.role!r} cannot generate text")
        h = request_hash("generate", model.model_name, _generation_payload(req))

        def live() -> dict:
            t0 = time.perf_counter()
            resp = self.adapter.generate(self._http(), model, req)
            return asdict(GenerationResponse(resp.text, resp.prompt_tokens, resp.completion_tokens, round((time.perf_counter() - t0) * 1000)))

        data = self._dispatch(h, "generate", model.model_name, live)
        try:
            return GenerationResponse(**data)
        except TypeError as exc:
            raise MalformedPayloadError(f"cassette record {h} is not a generation response") from exc

    def embed_text(self, model: ModelRef, text: str) -> EmbeddingVector:
        if model.role != "embedder":
            raise ValidationError(f"model role {model.role!r} cannot embed")
        if not text.strip():
            raise ValidationError("cannot embed empty text")
        h = request_hash("embed", model.model_name, {"input": text})
        with self._lock:
            cached = self._embed_cache.get(h)
        if cached is not None:
            self.stats.cache_hits += 1
            return cached

        def live() -> dict:
            return {"values": self.adapter.embed(self._http(), model, text)}

        data = self._dispatch(h, "embed", model.model_name, live)
        try:
            vec = EmbeddingVector(tuple(data["values"]))
        except (KeyError, TypeError, ValidationError) as exc:
            raise MalformedPayloadError(f"record {h} does not hold a finite vector") from exc
        with self._lock:
            known = self._dims.setdefault(model.model_name, vec.dim)
            if known != vec.dim:
                raise DimensionDriftError(f"{model.model_name}: dimension changed from {known} to {vec.dim}")
            self._embed_cache[h] = vec
        return vec

    # -- internals --------------------------------------------------------

    def _http(self) -> httpx.Client:
        if self.mode == "replay":
            raise BackendError("network access is disabled in replay mode")
        with self._lock:
            if self._client is None:
                self._client = self._external_client or httpx.Client(timeout=self._timeout)
            return self._client

    def _dispatch(self, h: str, kind: str, model_name: str, live: Callable[[], dict]) -> dict:
        if self.mode == "replay":
            rec = self._cassette.get(h)
            if rec is None:
                raise ReplayMissError(h)
            self.stats.replay_hits += 1
            return dict(rec.response)

        data = self._with_retries(live)
        if self.mode == "record":
            with self._lock:
                if h not in self._cassette:
                    rec = TranscriptRecord(h, kind, model_name, data, self.clock())
                    self._cassette[h] = rec
                    append_jsonl(self._cassette_path, asdict(rec))
        return data

    def _with_retries(self, fn: Callable[[], dict]) -> dict:
        last: BackendError | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                with self._slots:
                    self.stats.network_calls += 1
                    return fn()
            except BackendError as exc:
                last = exc
                if not _retryable(exc) or attempt == self.max_retries:
                    break
                delay = min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))
                log.warning("backend call failed (%s); retry %d/%d in %.1fs", exc, attempt, self.max_retries - 1, delay)
                self.sleep(delay)
        assert last is not None
        raise last


def _require_cassette(mode: str, path: str | os.PathLike | None) -> str | os.PathLike:
    if path is None:
        raise ConfigError(f"mode {mode!r} requires a cassette path")
    return path


def _load_cassette(path: Path) -> dict[str, TranscriptRecord]:
    records: dict[str, TranscriptRecord] = {}
    for raw in iter_jsonl(path):
        try:
            rec = TranscriptRecord(**raw)
        except TypeError as exc:
            raise ArtifactIOError(f"{path}: malformed transcript record") from exc
        records.setdefault(rec.request_hash, rec)
    return records
