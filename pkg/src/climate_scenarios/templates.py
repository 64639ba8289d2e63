"""Versioned prompt templates shipped with the package.

Template hashes go into every artifact's provenance header so a changed
wording is visible in the outputs it produced.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from .jsonl import sha256_text

TEMPLATE_NAMES = (
    "scenario_system",
    "themes",
    "followup",
    "judge_system",
    "decompose",
    "statement_verdict",
    "reverse_questions",
    "context_relevance",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    return resources.files("climate_scenarios").joinpath("data", "templates", f"{name}.txt").read_text(encoding="utf-8")


def render(name: str, **fields: object) -> str:
    return load_template(name).format(**fields).rstrip("\n")


def template_hashes() -> dict[str, str]:
    return {name: sha256_text(load_template(name)) for name in TEMPLATE_NAMES}
