"""Retrieval-grounded scenario generation, theme elicitation and follow-ups."""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from typing import Callable, Iterable, Sequence

from .errors import BackendError, ValidationError
from .gateway import GenerationRequest, ModelGateway, ModelRef
from .index import EmbeddingIndex, RetrievalResult
from .jsonl import iter_jsonl
from .templates import render

THEME_QUERY = "energy transition themes in climate policy for Sub-Saharan Africa"

_MARKER = re.compile(r"^(?:\*\*)?Scenario\b", re.MULTILINE)
_META_LINE = re.compile(
    r"^[ \t]*(?:\*\*)?(?:Note\b|Please note\b|I hope\b|Let me know\b|Feel free\b|Disclaimer\b)",
    re.MULTILINE,
)
_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: int
    theme: str
    text: str
    followups: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError(f"prompt {self.prompt_id}: empty text")
        object.__setattr__(self, "followups", tuple(self.followups))


@dataclass(frozen=True)
class CleaningReport:
    stripped_prefix_len: int
    stripped_suffix_len: int


@dataclass(frozen=True)
class ScenarioResponse:
    response_id: str
    prompt_id: int
    raw_text: str
    cleaned_text: str
    retrieved_chunk_ids: tuple[str, ...]
    generator: ModelRef
    followup_texts: tuple[str, ...] = ()
    created_at: str = ""

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["retrieved_chunk_ids"] = list(self.retrieved_chunk_ids)
        rec["followup_texts"] = list(self.followup_texts)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> ScenarioResponse:
        return cls(
            response_id=rec["response_id"],
            prompt_id=int(rec["prompt_id"]),
            raw_text=rec["raw_text"],
            cleaned_text=rec["cleaned_text"],
            retrieved_chunk_ids=tuple(rec["retrieved_chunk_ids"]),
            generator=ModelRef(**rec["generator"]),
            followup_texts=tuple(rec.get("followup_texts", ())),
            created_at=rec.get("created_at", ""),
        )


class FollowupError(BackendError):
    """A follow-up failed; ``partial`` holds the replies gathered before it."""

    def __init__(self, index: int, partial: ScenarioResponse, cause: Exception) -> None:
        super().__init__(f"follow-up {index} for {partial.response_id} failed: {cause}")
        self.index = index
        self.partial = partial


def load_prompts(path: str | os.PathLike | None = None) -> list[PromptSpec]:
    """Read a prompt corpus; with no path, the bundled 30-prompt set."""
    if path is None:
        src = resources.files("climate_scenarios").joinpath("data", "prompts.jsonl")
        records = [json.loads(line) for line in src.read_text(encoding="utf-8").splitlines() if line.strip()]
    else:
        records = list(iter_jsonl(path))
    prompts = [PromptSpec(int(r["prompt_id"]), r.get("theme", ""), r["text"], tuple(r.get("followups", ()))) for r in records]
    ids = [p.prompt_id for p in prompts]
    if len(set(ids)) != len(ids):
        raise ValidationError("prompt_id values must be unique")
    return prompts


def clean_response(raw: str) -> tuple[str, CleaningReport]:
    """Trim chatter around the scenarios without touching the body.

    Everything before the first line starting with ``Scenario`` or
    ``**Scenario`` is dropped, as is a trailing block that begins with a
    meta remark ("Note:", "I hope", "Let me know", ...) after the last
    scenario heading. The result is always a slice of ``raw``.
    """
    markers = list(_MARKER.finditer(raw))
    if not markers:
        return raw, CleaningReport(0, 0)
    start = markers[0].start()
    last_line_end = raw.find("\n", markers[-1].start())
    end = len(raw)
    if last_line_end != -1:
        meta = _META_LINE.search(raw, last_line_end + 1)
        if meta is not None:
            end = start + len(raw[start : meta.start()].rstrip())
    return raw[start:end], CleaningReport(start, len(raw) - end)


def parse_lines(reply: str) -> list[str]:
    """Non-blank reply lines with list bullets/numbering removed."""
    out = []
    for line in reply.splitlines():
        line = _LIST_PREFIX.sub("", line).strip()
        if line:
            out.append(line)
    return out


def doc_id_of(chunk_id: str) -> str:
    return chunk_id.rsplit(":", 1)[0]


def context_blocks(results: Iterable[RetrievalResult]) -> tuple[str, ...]:
    return tuple(f"[{doc_id_of(r.chunk_id)}] {r.text}" for r in results)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ScenarioGenerator:
    gateway: ModelGateway
    index: EmbeddingIndex
    generator: ModelRef
    embedder: ModelRef
    k: int = 4
    seed: int = 0
    max_tokens: int = 2048
    temperature: float = 0.0
    max_workers: int = 4
    clock: Callable[[], str] = field(default=_utcnow)

    def retrieve(self, text: str, k: int | None = None) -> list[RetrievalResult]:
        return self.index.query_top_k(self.gateway.embed_text(self.embedder, text), k or self.k)

    def _request(self, prompt: str, blocks: Sequence[str], system: str = "") -> GenerationRequest:
        return GenerationRequest(
            prompt=prompt,
            system=system,
            context_blocks=tuple(blocks),
            temperature=self.temperature,
            seed=self.seed,
            max_tokens=self.max_tokens,
        )

    def elicit_themes(self, n: int) -> list[str]:
        if n < 1:
            raise ValidationError(f"n must be positive, got {n}")
        hits = self.retrieve(THEME_QUERY)
        reply = self.gateway.generate(self.generator, self._request(render("themes", n=n), context_blocks(hits)))
        themes = parse_lines(reply.text)
        if len(themes) < n:
            raise ValidationError(f"asked for {n} themes, model returned {len(themes)}")
        return themes[:n]

    def generate_scenario(self, prompt: PromptSpec, k: int | None = None) -> ScenarioResponse:
        hits = self.retrieve(prompt.text, k)
        req = self._request(prompt.text, context_blocks(hits), system=render("scenario_system"))
        raw = self.gateway.generate(self.generator, req).text
        if not raw.strip():
            raise BackendError(f"prompt {prompt.prompt_id}: empty model reply")
        cleaned, _ = clean_response(raw)
        return ScenarioResponse(
            response_id=f"p{prompt.prompt_id:02d}",
            prompt_id=prompt.prompt_id,
            raw_text=raw,
            cleaned_text=cleaned,
            retrieved_chunk_ids=tuple(h.chunk_id for h in hits),
            generator=self.generator,
            created_at=self.clock(),
        )

    def generate_all(self, prompts: Sequence[PromptSpec]) -> list[ScenarioResponse]:
        """Generate concurrently; results come back in ``prompt_id`` order."""
        ordered = sorted(prompts, key=lambda p: p.prompt_id)
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(self.generate_scenario, ordered))

    def run_followups(self, resp: ScenarioResponse, model: ModelRef, followups: Sequence[str]) -> ScenarioResponse:
        if not resp.cleaned_text.strip():
            raise ValidationError(f"{resp.response_id}: nothing to follow up on")
        replies: list[str] = []
        for i, question in enumerate(followups, 1):
            req = self._request(render("followup", followup=question), (resp.cleaned_text,))
            try:
                replies.append(self.gateway.generate(model, req).text)
            except BackendError as exc:
                raise FollowupError(i, replace(resp, followup_texts=resp.followup_texts + tuple(replies)), exc) from exc
        return replace(resp, followup_texts=resp.followup_texts + tuple(replies))
