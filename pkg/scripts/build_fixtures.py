"""Rebuild the shipped replay fixtures.

Writes deterministic validation decisions and human ratings, then records a
cassette by running ``run-all`` in record mode against the scripted backend.
Run from the repository root:

    python3 scripts/build_fixtures.py
"""

from __future__ import annotations

import random
import shutil
import sys
import tempfile
from pathlib import Path

from climate_scenarios.cli import main
from climate_scenarios.jsonl import write_jsonl
from climate_scenarios.testing import JudgeProfile, ScriptedBackend

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
N_PROMPTS = 30
VALIDATORS = ("v1", "v2")
REJECTED_BY = {"p29": "v2"}  # one validator rejects -> response excluded under the AND rule

JUDGES = {
    # smaller judge: noisier verdicts, drops more words from reverse questions
    "gemma2:2b": JudgeProfile(supported_overlap=0.9, supported_no_overlap=0.55, relevant_overlap=0.85, relevant_no_overlap=0.45, question_dropout=0.5),
    "mistral:7b": JudgeProfile(supported_overlap=0.97, supported_no_overlap=0.75, relevant_overlap=0.92, relevant_no_overlap=0.35, question_dropout=0.3),
}


def validation_records() -> list[dict]:
    out = []
    for i in range(1, N_PROMPTS + 1):
        rid = f"p{i:02d}"
        for v in VALIDATORS:
            ok = REJECTED_BY.get(rid) != v
            out.append({"response_id": rid, "validator_id": v, "valid": ok, "notes": "" if ok else "scenario contradicts prompt framing"})
    return out


def rating_records(seed: int = 7) -> list[dict]:
    rng = random.Random(seed)
    weights = {
        "faithfulness": ([3, 4, 5], [2, 5, 3]),
        "answer_relevancy": ([4, 5], [1, 9]),
        "context_utilization": ([2, 3, 4, 5], [1, 3, 4, 2]),
    }
    out = []
    for i in range(1, N_PROMPTS + 1):
        rid = f"p{i:02d}"
        if rid in REJECTED_BY:
            continue
        for metric, (levels, w) in weights.items():
            out.append({"response_id": rid, "metric": metric, "rating": rng.choices(levels, w)[0]})
    return out


def main_() -> int:
    write_jsonl(FIXTURES / "validation.jsonl", validation_records())
    write_jsonl(FIXTURES / "ratings.jsonl", rating_records())
    cassette = FIXTURES / "cassette.jsonl"
    cassette.unlink(missing_ok=True)
    backend = ScriptedBackend(judges=JUDGES)
    out = Path(tempfile.mkdtemp(prefix="fixture-run-"))
    try:
        code = main(
            ["run-all", "--config", str(FIXTURES / "config.json"), "--mode", "record", "--output-dir", str(out)],
            client=backend.client(),
        )
    finally:
        shutil.rmtree(out, ignore_errors=True)
    print(f"recorded {len(backend.calls)} backend calls into {cassette}")
    return code


if __name__ == "__main__":
    sys.exit(main_())
