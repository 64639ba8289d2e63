"""Exact cosine top-k retrieval over chunk embeddings."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .jsonl import append_jsonl, iter_jsonl, write_jsonl

# numpy's dot is only used to shortlist candidates; this margin is far above
# its rounding error for unit vectors (~dim * 1e-16) and keeps the exact
# top-k inside the shortlist.
_SHORTLIST_MARGIN = 1e-9
_SAFE_RANGE = (1e-150, 1e150)


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValidationError("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("embedding contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.values))


def _as_vector(v: EmbeddingVector | Sequence[float]) -> EmbeddingVector:
    return v if isinstance(v, EmbeddingVector) else EmbeddingVector(tuple(v))


def _unit(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(_rescaled(values), dtype=np.float64)
    return v / np.linalg.norm(v)


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def _safe(denominator: float) -> bool:
    # products of norms far from 1 risk under/overflow in the squares and the dot product
    return _SAFE_RANGE[0] < denominator < _SAFE_RANGE[1]


def _rescaled(values: Sequence[float]) -> tuple[float, ...]:
    m = max(abs(v) for v in values)
    return tuple(v / m for v in values)


def _cosine_rescaled(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = _rescaled(a), _rescaled(b)
    na, nb = math.sqrt(math.fsum(v * v for v in a)), math.sqrt(math.fsum(v * v for v in b))
    return _dot(a, b) / (na * nb)


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    """Cosine similarity with correctly rounded sums, so results are bit-reproducible.

    Vectors with extreme magnitudes are rescaled by their largest component
    first; ordinary embeddings never take that path.
    """
    a, b = _as_vector(a), _as_vector(b)
    if a.dim != b.dim:
        raise ValidationError(f"dimension mismatch: {a.dim} != {b.dim}")
    if not any(a.values) or not any(b.values):
        raise ValidationError("cosine is undefined for a zero vector")
    na, nb = a.norm(), b.norm()
    if not _safe(na * nb):
        return _cosine_rescaled(a.values, b.values)
    return _dot(a.values, b.values) / (na * nb)


@dataclass(frozen=True)
class IndexEntry:
    chunk_id: str
    vector: EmbeddingVector
    text: str = ""

    def to_record(self) -> dict:
        return {"chunk_id": self.chunk_id, "dim": self.vector.dim, "values": list(self.vector.values), "text": self.text}

    @classmethod
    def from_record(cls, rec: Mapping) -> IndexEntry:
        vec = EmbeddingVector(tuple(rec["values"]))
        if vec.dim != int(rec["dim"]):
            raise ValidationError(f"{rec['chunk_id']}: declared dim {rec['dim']} but {vec.dim} values")
        return cls(str(rec["chunk_id"]), vec, str(rec.get("text", "")))


@dataclass(frozen=True)
class RetrievalResult:
    chunk_id: str
    score: float
    text: str


class EmbeddingIndex:
    """In-memory brute-force index.

    Writers need exclusive access; concurrent ``query_top_k`` calls are safe
    once loading is finished. If ``log_path`` is given every upsert is also
    appended there, and ``load`` replays that log (last record per id wins).
    """

    def __init__(self, log_path: str | os.PathLike | None = None) -> None:
        self._entries: dict[str, IndexEntry] = {}
        self._norms: dict[str, float] = {}
        self._dim: int | None = None
        self._matrix: np.ndarray | None = None
        self._ids: list[str] = []
        self._log_path = Path(log_path) if log_path is not None else None

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._entries

    @property
    def dim(self) -> int | None:
        return self._dim

    def get(self, chunk_id: str) -> IndexEntry:
        return self._entries[chunk_id]

    def entries(self) -> list[IndexEntry]:
        return list(self._entries.values())

    def upsert(self, entry: IndexEntry) -> None:
        if self._dim is not None and entry.vector.dim != self._dim:
            raise ValidationError(f"{entry.chunk_id}: dim {entry.vector.dim} does not match index dim {self._dim}")
        norm = entry.vector.norm()
        if not any(entry.vector.values):
            raise ValidationError(f"{entry.chunk_id}: zero vector cannot be indexed")
        self._dim = entry.vector.dim
        self._entries[entry.chunk_id] = entry
        self._norms[entry.chunk_id] = norm
        self._matrix = None
        if self._log_path is not None:
            append_jsonl(self._log_path, entry.to_record())

    def _shortlist_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._ids = list(self._entries)
            self._matrix = np.array([_unit(self._entries[i].vector.values) for i in self._ids])
        return self._matrix

    def query_top_k(self, query: EmbeddingVector | Sequence[float], k: int) -> list[RetrievalResult]:
        """Top ``min(k, len(self))`` entries by cosine; ties go to the smaller chunk_id."""
        if not self._entries:
            raise ValidationError("query on an empty index")
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        query = _as_vector(query)
        if query.dim != self._dim:
            raise ValidationError(f"query dim {query.dim} does not match index dim {self._dim}")
        qnorm = query.norm()
        if not any(query.values):
            raise ValidationError("zero query vector")

        if k >= len(self._entries):
            candidates = list(self._entries)
        else:
            approx = self._shortlist_matrix() @ _unit(query.values)
            kth = np.partition(approx, len(approx) - k)[len(approx) - k]
            candidates = [self._ids[i] for i in np.flatnonzero(approx >= kth - _SHORTLIST_MARGIN)]

        scored = []
        for cid in candidates:
            entry = self._entries[cid]
            den = self._norms[cid] * qnorm
            if _safe(den):
                score = _dot(entry.vector.values, query.values) / den
            else:
                score = _cosine_rescaled(entry.vector.values, query.values)
            scored.append((-score, cid))
        scored.sort()
        return [RetrievalResult(cid, -neg, self._entries[cid].text) for neg, cid in scored[:k]]

    def save(self, path: str | os.PathLike, provenance: Mapping | None = None) -> None:
        write_jsonl(path, (e.to_record() for e in self._entries.values()), provenance)

    @classmethod
    def load(cls, path: str | os.PathLike) -> EmbeddingIndex:
        index = cls()
        for rec in iter_jsonl(path):
            index.upsert(IndexEntry.from_record(rec))
        return index

    @classmethod
    def from_entries(cls, entries: Iterable[IndexEntry]) -> EmbeddingIndex:
        index = cls()
        for e in entries:
            index.upsert(e)
        return index
