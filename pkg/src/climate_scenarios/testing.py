"""A deterministic stand-in for a local model server.

``ScriptedBackend`` is an ``httpx.MockTransport`` handler that understands the
package's own prompt templates and answers them with reproducible,
content-dependent text, hashed bag-of-words embeddings and judge verdicts.
It is used to record the fixture cassette and in tests; it is not a model.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

import httpx

from .templates import render

_WORD = re.compile(r"[a-z][a-z\-]+")
_STOP = frozenset(
    "that this with from into their these those which where while would could should about across "
    "including include consider ensure africa sub-saharan saharan policy policies scenarios scenario "
    "future potential develop generate explore propose imagine climate".split()
)

SCENARIO_NAMES = (
    "African Renaissance",
    "Regional Power Pool",
    "Community Energy Compact",
    "Green Industrial Corridor",
    "Adaptive Governance Pathway",
    "Climate Finance Bridge",
    "Resilient Commons",
    "Just Transition Accord",
)

DEFAULT_THEMES = (
    "renewable energy adoption",
    "technology transfer",
    "climate finance",
    "energy efficiency",
    "adaptation and resilience",
    "carbon markets",
    "capacity building",
    "just transition",
)


def content_words(text: str) -> list[str]:
    return [w for w in _WORD.findall(text.lower()) if len(w) >= 4 and w not in _STOP]


def _digest(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


def _uniform(*parts: str) -> float:
    return _digest(*parts) / 2.0**64


def hashed_embedding(text: str, dim: int = 32) -> list[float]:
    """Signed feature hashing of lower-cased words plus a constant bias term."""
    vec = [0.0] * dim
    vec[0] = 1.0
    for word, count in Counter(_WORD.findall(text.lower())).items():
        h = _digest("emb", word)
        vec[1 + h % (dim - 1)] += count * (1.0 if (h >> 32) & 1 else -1.0)
    return vec


def _between(text: str, start: str, end: str | None = None) -> str:
    i = text.index(start) + len(start)
    j = text.index(end, i) if end else len(text)
    return text[i:j]


def _distinct(words: list[str]) -> list[str]:
    return list(dict.fromkeys(words))


@dataclass
class JudgeProfile:
    """Probabilities that a scripted judge answers "yes"."""

    supported_overlap: float = 0.95
    supported_no_overlap: float = 0.7
    relevant_overlap: float = 0.9
    relevant_no_overlap: float = 0.4
    overlap_needed: int = 2
    question_dropout: float = 0.4


@dataclass
class ScriptedBackend:
    dim: int = 32
    judges: dict[str, JudgeProfile] = field(default_factory=dict)
    themes: tuple[str, ...] = DEFAULT_THEMES
    calls: list[tuple[str, dict]] = field(default_factory=list)

    def client(self) -> httpx.Client:
        return httpx.Client(transport=httpx.MockTransport(self))

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.calls.append((request.url.path, body))
        if request.url.path == "/api/embeddings":
            return httpx.Response(200, json={"embedding": hashed_embedding(body["prompt"], self.dim)})
        if request.url.path == "/api/generate":
            text = self.reply(body["model"], body.get("system", ""), body["prompt"])
            return httpx.Response(200, json={"response": text, "prompt_eval_count": len(body["prompt"]) // 4, "eval_count": len(text) // 4})
        return httpx.Response(404, text="unknown endpoint")

    # -- dispatch ---------------------------------------------------------

    def reply(self, model: str, system: str, prompt: str) -> str:
        if system == render("scenario_system"):
            return self._scenarios(prompt)
        if "energy-transition themes" in prompt:
            return "\n".join(self.themes)
        if "The scenarios you generated earlier are quoted above." in prompt:
            return self._roadmap(prompt)
        profile = self.judges.get(model, JudgeProfile())
        if prompt.startswith("Break the answer below"):
            return self._statements(_between(prompt, "Answer:\n"))
        if prompt.startswith("Decide whether the statement"):
            return self._supported(model, profile, _between(prompt, "Context:\n", "\n\nStatement:\n"), _between(prompt, "Statement:\n"))
        if prompt.startswith("Write ") and "different questions" in prompt:
            n = int(re.match(r"Write (\d+) different", prompt).group(1))
            return self._questions(model, profile, n, _between(prompt, "Answer:\n"))
        if prompt.startswith("Given the question and the answer"):
            question = _between(prompt, "Question:\n", "\n\nAnswer:\n")
            return self._relevant(model, profile, question, _between(prompt, "Context excerpt:\n"))
        return "I am not sure how to respond to that."

    # -- generators -------------------------------------------------------

    def _scenarios(self, user_text: str) -> str:
        blocks = user_text.split("\n\n")
        question = blocks[-1]
        context = " ".join(blocks[:-1])
        qw = _distinct(content_words(question)) or ["energy"]
        cw = _distinct(content_words(context)) or ["cooperation"]
        h = _digest("scen", question)
        parts = ["Here are three potential climate policy scenarios for Sub-Saharan Africa:", ""]
        for i in range(3):
            name = SCENARIO_NAMES[(h + 3 * i) % len(SCENARIO_NAMES)]
            a, b, c, d = (qw[(i * 4 + j) % len(qw)] for j in range(4))
            x, y, z = (cw[(h + i * 3 + j) % len(cw)] for j in range(3))
            parts += [
                f'**Scenario {i + 1}: "{name}"**',
                "",
                f"* **Policy Incentives:** Governments introduce measures on {a} and {b} that build on {x} commitments.",
                f"* **Implementation Challenges:** Progress depends on {c}, {y} and sustained {z}.",
                f"* **Equitable Access Mechanisms:** Programmes extend {d} benefits to rural and marginalized communities.",
                "",
            ]
        tail = ["Note: These scenarios are illustrative and should be adapted to national circumstances."]
        if h % 3 == 0:
            tail.append("I hope this helps with your planning.")
        return "\n".join(parts + tail)

    def _roadmap(self, user_text: str) -> str:
        question = user_text.rsplit("\n\n", 1)[-1]
        focus = " ".join(content_words(question)[:3]) or "implementation"
        return "\n".join(
            [
                f"Roadmap focusing on {focus}:",
                "- Short-term (0-2 years): set up coordination units and baseline data collection.",
                "- Medium-term (3-7 years): scale financing and regional grid links.",
                "- Long-term (8+ years): consolidate institutions and review targets.",
            ]
        )

    def _statements(self, answer: str) -> str:
        lines = []
        for line in answer.splitlines():
            line = line.strip()
            if not line.startswith(("* ", "- ")):
                continue
            line = re.sub(r"\*\*([^*]+)\*\*\s*", r"\1 ", line[2:]).strip()
            lines.append(line)
        if not lines:
            lines = [s.strip() for s in re.split(r"(?<=[.!?])\s+", answer) if s.strip()]
        return "\n".join(lines[:6])

    def _supported(self, model: str, p: JudgeProfile, context: str, statement: str) -> str:
        overlap = len(set(content_words(statement)) & set(content_words(context)))
        prob = p.supported_overlap if overlap >= 1 else p.supported_no_overlap
        if _uniform("sup", model, statement, context) < prob:
            return "yes"
        return "no. The context does not state this."

    def _questions(self, model: str, p: JudgeProfile, n: int, answer: str) -> str:
        words = _distinct(content_words(answer)) or ["energy"]
        out = []
        for i in range(n):
            kept = [w for w in words[:12] if _uniform("q", model, answer, str(i), w) >= p.question_dropout]
            kept = kept or words[:2]
            out.append(f"What policies for Sub-Saharan Africa address {' and '.join(kept)}?")
        return "\n".join(out)

    def _relevant(self, model: str, p: JudgeProfile, question: str, context: str) -> str:
        overlap = len(set(content_words(question)) & set(content_words(context)))
        prob = p.relevant_overlap if overlap >= p.overlap_needed else p.relevant_no_overlap
        return "Yes" if _uniform("rel", model, question, context) < prob else "No"
