"""Human validation decisions and 1-5 rubric ratings."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ValidationError
from .evaluation import METRICS, MetricScore
from .jsonl import append_jsonl, iter_jsonl
from .scenario import ScenarioResponse

HUMAN_EVALUATOR = "human"
RATING_SCALE = range(1, 6)


@dataclass(frozen=True)
class ValidationRecord:
    response_id: str
    validator_id: str
    valid: bool
    notes: str = ""


@dataclass(frozen=True)
class RubricRating:
    response_id: str
    metric: str
    rating: int

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}")
        if isinstance(self.rating, bool) or self.rating not in RATING_SCALE:
            raise ValidationError(f"rating must be an integer 1..5, got {self.rating!r}")


def normalize(rating: int) -> float:
    """Map a 1..5 rating onto (0, 1] as rating / 5."""
    if isinstance(rating, bool) or rating not in RATING_SCALE:
        raise ValidationError(f"rating must be an integer 1..5, got {rating!r}")
    return rating / 5


def combine_validations(records: Iterable[ValidationRecord]) -> dict[str, bool]:
    """Per response: valid only if every validator marked it valid."""
    out: dict[str, bool] = {}
    for r in records:
        out[r.response_id] = out.get(r.response_id, True) and r.valid
    return out


def validation_rate(records: Iterable[ValidationRecord]) -> float:
    decisions = combine_validations(records)
    if not decisions:
        raise ValidationError("no validation records")
    return sum(decisions.values()) / len(decisions)


def format_percent(fraction: float) -> str:
    pct = (Decimal(repr(fraction)) * 100).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return f"{pct}%"


def ratings_to_scores(ratings: Iterable[RubricRating]) -> list[MetricScore]:
    return [MetricScore(r.response_id, HUMAN_EVALUATOR, r.metric, normalize(r.rating)) for r in ratings]


# -- files ------------------------------------------------------------------


def load_validations(path: str | os.PathLike) -> list[ValidationRecord]:
    """Latest record per (response_id, validator_id), in first-seen order."""
    latest: dict[tuple[str, str], ValidationRecord] = {}
    for rec in iter_jsonl(path):
        v = ValidationRecord(str(rec["response_id"]), str(rec["validator_id"]), bool(rec["valid"]), str(rec.get("notes", "")))
        latest[(v.response_id, v.validator_id)] = v
    return list(latest.values())


def load_ratings(path: str | os.PathLike) -> list[RubricRating]:
    """Latest rating per (response_id, metric)."""
    latest: dict[tuple[str, str], RubricRating] = {}
    for rec in iter_jsonl(path):
        r = RubricRating(str(rec["response_id"]), rec["metric"], rec["rating"])
        latest[(r.response_id, r.metric)] = r
    return list(latest.values())


@lru_cache(maxsize=1)
def rubric() -> dict:
    src = resources.files("climate_scenarios").joinpath("data", "rubric.json")
    return json.loads(src.read_text(encoding="utf-8"))


def render_rubric(metric: str) -> str:
    data = rubric()
    title = metric.replace("_", " ").title()
    lines = [f"{title} rubric:"]
    for level in map(str, RATING_SCALE):
        lines.append(f"  {level} ({data['scale'][level]}): {data['criteria'][metric][level]}")
    return "\n".join(lines)


# -- interactive session ------------------------------------------------------


class _EndSession(Exception):
    pass


def _ask(prompt: str, input_fn: Callable[[str], str]) -> str:
    try:
        return input_fn(prompt).strip()
    except EOFError:
        raise _EndSession from None


def annotate(
    responses: Sequence[ScenarioResponse],
    validation_path: str | os.PathLike,
    ratings_path: str | os.PathLike,
    validator_id: str,
    *,
    prompts: Mapping[int, str] | None = None,
    redo: bool = False,
    input_fn: Callable[[str], str] = input,
    output: Callable[[str], None] = print,
) -> tuple[int, int]:
    """Walk through responses, recording validity, notes and 1-5 ratings.

    Responses this validator already finished are skipped unless ``redo``.
    Records for a response are appended only after all of its answers are
    in, so an interrupted session never leaves a half-rated response. Enter
    ``s`` to skip a response and ``q`` (or EOF) to stop.

    Returns (validation records written, ratings written).
    """
    validation_path, ratings_path = Path(validation_path), Path(ratings_path)
    done_valid = {
        v.response_id: v for v in (load_validations(validation_path) if validation_path.exists() else []) if v.validator_id == validator_id
    }
    rated = {(r.response_id, r.metric) for r in (load_ratings(ratings_path) if ratings_path.exists() else [])}
    n_valid = n_rated = 0

    for resp in responses:
        prev = done_valid.get(resp.response_id)
        finished = prev is not None and (not prev.valid or all((resp.response_id, m) in rated for m in METRICS))
        if finished and not redo:
            continue
        output(f"\n=== {resp.response_id} (prompt {resp.prompt_id}) ===")
        if prompts and resp.prompt_id in prompts:
            output(f"Prompt: {prompts[resp.prompt_id]}\n")
        output(resp.cleaned_text)
        try:
            while True:
                answer = _ask("Valid? [y/n, s=skip, q=quit] ", input_fn).lower()
                if answer in ("y", "n", "s", "q"):
                    break
                output("Please answer y, n, s or q.")
            if answer == "q":
                break
            if answer == "s":
                continue
            notes = _ask("Notes: ", input_fn)
            new_ratings = []
            if answer == "y":
                for metric in METRICS:
                    output(render_rubric(metric))
                    while True:
                        raw = _ask(f"{metric} rating [1-5]: ", input_fn)
                        if raw.isdigit() and int(raw) in RATING_SCALE:
                            new_ratings.append(RubricRating(resp.response_id, metric, int(raw)))
                            break
                        output("Rating must be a whole number from 1 to 5.")
        except _EndSession:
            break
        for r in new_ratings:
            append_jsonl(ratings_path, asdict(r))
        append_jsonl(validation_path, asdict(ValidationRecord(resp.response_id, validator_id, answer == "y", notes)))
        n_valid += 1
        n_rated += len(new_ratings)
    return n_valid, n_rated
