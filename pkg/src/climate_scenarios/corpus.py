"""Corpus loading and recursive character chunking.

The corpus is described by a line-delimited manifest; each entry points at a
pre-extracted UTF-8 text file. Chunk boundaries are computed on character
offsets (Python ``str`` indices, i.e. Unicode code points), never bytes.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ArtifactIOError, ValidationError
from .jsonl import read_jsonl

MEETING_GROUPS = ("convention", "kyoto_protocol", "paris_agreement")
DEFAULT_SEPARATORS = ("\n\n", "\n", " ", "")


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    meeting_group: str
    title: str
    body_text: str
    source_path: str
    verified: bool = False


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_size: int = 1000
    overlap: int = 100
    separators: tuple[str, ...] = DEFAULT_SEPARATORS

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValidationError(f"chunk_size must be positive, got {self.chunk_size}")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValidationError(
                f"overlap must satisfy 0 <= overlap < chunk_size, got {self.overlap}/{self.chunk_size}"
            )
        if not self.separators or self.separators[-1] != "":
            raise ValidationError("separators must end with the empty string")
        object.__setattr__(self, "separators", tuple(self.separators))


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    seq_index: int
    text: str
    char_span: tuple[int, int] = field(default=(0, 0))

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["char_span"] = list(self.char_span)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Chunk:
        start, end = rec["char_span"]
        return cls(rec["chunk_id"], rec["doc_id"], int(rec["seq_index"]), rec["text"], (int(start), int(end)))


def load_corpus(manifest_path: str | os.PathLike) -> list[SourceDocument]:
    """Read the manifest and load every referenced text file, in manifest order.

    Relative ``path`` entries are resolved against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ArtifactIOError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    docs: list[SourceDocument] = []
    seen: set[str] = set()
    for entry in read_jsonl(manifest_path):
        doc_id = str(entry.get("doc_id", "")).strip()
        if not doc_id:
            raise ValidationError(f"manifest entry without doc_id: {entry}")
        if doc_id in seen:
            raise ValidationError(f"duplicate doc_id {doc_id!r} in manifest")
        group = entry.get("meeting_group")
        if group not in MEETING_GROUPS:
            raise ValidationError(f"{doc_id}: unknown meeting_group {group!r}")
        rel = entry.get("path")
        if not rel:
            raise ValidationError(f"{doc_id}: manifest entry has no path")
        path = base / rel
        try:
            body = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ArtifactIOError(f"{doc_id}: cannot read {path}: {exc}") from exc
        if not body.strip():
            raise ValidationError(f"{doc_id}: empty body in {path}")
        seen.add(doc_id)
        docs.append(
            SourceDocument(
                doc_id=doc_id,
                meeting_group=group,
                title=str(entry.get("title", "")),
                body_text=body,
                source_path=str(rel),
                verified=bool(entry.get("verified", False)),
            )
        )
    return docs


def _find_all(text: str, sep: str, start: int, end: int) -> list[int]:
    hits = []
    pos = text.find(sep, start, end)
    while pos != -1:
        hits.append(pos)
        pos = text.find(sep, pos + len(sep), end)
    return hits


def _fragments(text: str, start: int, end: int, separators: Sequence[str], limit: int) -> list[tuple[int, int]]:
    # Fragments partition [start, end); separators stay attached to the
    # front of the fragment they introduce so no character is dropped.
    for i, sep in enumerate(separators):
        if sep == "" or text.find(sep, start, end) != -1:
            break
    finer = separators[i + 1 :]

    if sep == "":
        return [(p, p + 1) for p in range(start, end)]

    cuts = [start, *(h for h in _find_all(text, sep, start, end) if h > start), end]
    out: list[tuple[int, int]] = []
    for s, e in zip(cuts, cuts[1:]):
        if e <= s:
            continue
        if e - s > limit and finer:
            out.extend(_fragments(text, s, e, finer, limit))
        else:
            out.append((s, e))
    return out


def recursive_split(text: str, config: ChunkingConfig | None = None, doc_id: str = "") -> list[Chunk]:
    """Split ``text`` into chunks of at most ``config.chunk_size`` characters.

    Fragments are produced with the coarsest separator present; any fragment
    still longer than the budget is re-split with the next finer separator.
    Fragments are then packed greedily. After a chunk is emitted, the shortest
    run of its trailing fragments holding at least ``overlap`` characters is
    carried into the next chunk, dropping more only when the next fragment
    would not otherwise fit. With coarse fragments the realized overlap can
    therefore exceed ``overlap``.
    """
    config = config or ChunkingConfig()
    if not text:
        return []
    size, overlap = config.chunk_size, config.overlap
    frags = _fragments(text, 0, len(text), config.separators, size)

    spans: list[tuple[int, int]] = []
    window: deque[tuple[int, int]] = deque()
    total = 0
    for s, e in frags:
        n = e - s
        if window and total + n > size:
            spans.append((window[0][0], window[-1][1]))
            while window:
                head = window[0][1] - window[0][0]
                if total - head >= overlap or total + n > size:
                    window.popleft()
                    total -= head
                else:
                    break
        window.append((s, e))
        total += n
    if window:
        spans.append((window[0][0], window[-1][1]))

    prefix = f"{doc_id}:" if doc_id else ""
    return [
        Chunk(chunk_id=f"{prefix}{i:05d}", doc_id=doc_id, seq_index=i, text=text[s:e], char_span=(s, e))
        for i, (s, e) in enumerate(spans)
    ]


def dedupe(chunks: Iterable[Chunk]) -> list[Chunk]:
    """Drop chunks whose text already appeared earlier in the sequence."""
    seen: set[str] = set()
    out = []
    for chunk in chunks:
        if chunk.text in seen:
            continue
        seen.add(chunk.text)
        out.append(chunk)
    return out


def chunk_corpus(docs: Iterable[SourceDocument], config: ChunkingConfig | None = None) -> list[Chunk]:
    chunks: list[Chunk] = []
    for doc in docs:
        chunks.extend(recursive_split(doc.body_text, config, doc_id=doc.doc_id))
    return dedupe(chunks)
