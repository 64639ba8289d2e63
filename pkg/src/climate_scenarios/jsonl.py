"""Line-delimited JSON artifacts with an optional provenance header line."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import ArtifactIOError

PROVENANCE_KEY = "_provenance"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    """Yield data records, skipping blank lines and the provenance header."""
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ArtifactIOError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if isinstance(rec, dict) and PROVENANCE_KEY in rec:
                continue
            yield rec


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    return list(iter_jsonl(path))


def read_provenance(path: str | os.PathLike) -> dict | None:
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            first = fh.readline()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if not first.strip():
        return None
    rec = json.loads(first)
    return rec.get(PROVENANCE_KEY) if isinstance(rec, dict) else None


def write_jsonl(
    path: str | os.PathLike,
    records: Iterable[Mapping[str, Any]],
    provenance: Mapping[str, Any] | None = None,
) -> int:
    """Write records atomically (temp file + rename). Returns the record count."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("w", encoding="utf-8", newline="\n") as fh:
            if provenance is not None:
                fh.write(canonical_json({PROVENANCE_KEY: dict(provenance)}) + "\n")
            for rec in records:
                fh.write(canonical_json(rec) + "\n")
                n += 1
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return n


def append_jsonl(path: str | os.PathLike, record: Mapping[str, Any]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(canonical_json(record) + "\n")
            fh.flush()
    except OSError as exc:
        raise ArtifactIOError(f"cannot append to {path}: {exc}") from exc
