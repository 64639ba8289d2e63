"""Reference-free answer metrics computed with an LLM judge.

* faithfulness -- share of the answer's statements the judge finds supported
  by the retrieved contexts;
* answer relevancy -- mean (negatives clamped to 0) cosine between the
  original prompt and questions the judge reverse-engineers from the answer;
* context utilization -- rank-weighted precision of the contexts the judge
  marks as useful for the answer.

Judges must start every verdict with ``yes`` or ``no``; anything else is a
``JudgeParseError``.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .errors import JudgeParseError, ValidationError
from .gateway import GenerationRequest, ModelGateway, ModelRef
from .index import cosine
from .scenario import parse_lines
from .templates import render

METRICS = ("faithfulness", "answer_relevancy", "context_utilization")
DEFAULT_QUESTIONS = 3

_VERDICT = re.compile(r"\s*(yes|no)(?![A-Za-z0-9])[\s.,:;!-]*(.*)", re.IGNORECASE | re.DOTALL)


@dataclass(frozen=True)
class Verdict:
    statement: str
    supported: bool
    rationale: str = ""


@dataclass(frozen=True)
class MetricScore:
    response_id: str
    evaluator_id: str
    metric: str
    value: float

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"{self.metric} value {self.value} outside [0, 1]")

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> MetricScore:
        return cls(rec["response_id"], rec["evaluator_id"], rec["metric"], float(rec["value"]))


def parse_verdict(reply: str) -> tuple[bool, str]:
    m = _VERDICT.match(reply)
    if m is None:
        raise JudgeParseError(f"verdict must start with yes/no, got {reply[:60]!r}")
    return m.group(1).lower() == "yes", m.group(2).strip()


def faithfulness_score(supported: Sequence[bool]) -> float:
    if not supported:
        raise ValidationError("faithfulness is undefined without statements")
    return sum(1 for s in supported if s) / len(supported)


def answer_relevancy_score(cosines: Sequence[float]) -> float:
    if not cosines:
        raise ValidationError("answer relevancy needs at least one question")
    mean = math.fsum(max(0.0, c) for c in cosines) / len(cosines)
    return min(1.0, max(0.0, mean))


def context_utilization_score(relevant: Sequence[bool | int]) -> float:
    """Average of precision@k over the ranks k holding a relevant context."""
    hits = 0
    terms = []
    for k, v in enumerate(relevant, 1):
        if v:
            hits += 1
            terms.append(hits / k)
    if not hits:
        return 0.0
    return math.fsum(terms) / hits


@dataclass
class Evaluator:
    gateway: ModelGateway
    judge: ModelRef
    embedder: ModelRef
    evaluator_id: str
    n_questions: int = DEFAULT_QUESTIONS
    seed: int = 0
    max_tokens: int = 2048

    def _ask(self, prompt: str) -> str:
        req = GenerationRequest(
            prompt=prompt, system=render("judge_system"), temperature=0.0, seed=self.seed, max_tokens=self.max_tokens
        )
        return self.gateway.generate(self.judge, req).text

    def decompose_statements(self, answer: str) -> list[str]:
        if not answer.strip():
            raise ValidationError("cannot decompose an empty answer")
        statements = parse_lines(self._ask(render("decompose", answer=answer)))
        if not statements:
            raise JudgeParseError("judge returned no statements")
        return statements

    def judge_statements(self, statements: Sequence[str], contexts: Sequence[str]) -> list[Verdict]:
        joined = "\n\n".join(contexts)
        verdicts = []
        for s in statements:
            ok, why = parse_verdict(self._ask(render("statement_verdict", context=joined, statement=s)))
            verdicts.append(Verdict(s, ok, why))
        return verdicts

    def faithfulness(self, answer: str, contexts: Sequence[str]) -> float:
        if not contexts:
            raise ValidationError("faithfulness needs at least one context")
        verdicts = self.judge_statements(self.decompose_statements(answer), contexts)
        return faithfulness_score([v.supported for v in verdicts])

    def answer_relevancy(self, prompt: str, answer: str, n: int | None = None) -> float:
        n = n or self.n_questions
        if n < 1:
            raise ValidationError("n must be >= 1")
        if not answer.strip():
            raise ValidationError("cannot score an empty answer")
        questions = parse_lines(self._ask(render("reverse_questions", n=n, answer=answer)))
        if len(questions) < n:
            raise JudgeParseError(f"asked for {n} questions, judge returned {len(questions)}")
        target = self.gateway.embed_text(self.embedder, prompt)
        return answer_relevancy_score([cosine(self.gateway.embed_text(self.embedder, q), target) for q in questions[:n]])

    def context_utilization(self, prompt: str, answer: str, contexts: Sequence[str]) -> float:
        if not contexts:
            raise ValidationError("context utilization needs at least one context")
        relevant = []
        for ctx in contexts:
            ok, _ = parse_verdict(self._ask(render("context_relevance", prompt=prompt, answer=answer, context=ctx)))
            relevant.append(ok)
        return context_utilization_score(relevant)

    def evaluate(self, response_id: str, prompt: str, answer: str, contexts: Sequence[str]) -> list[MetricScore]:
        values = {
            "answer_relevancy": self.answer_relevancy(prompt, answer),
            "context_utilization": self.context_utilization(prompt, answer, contexts),
            "faithfulness": self.faithfulness(answer, contexts),
        }
        return [MetricScore(response_id, self.evaluator_id, m, values[m]) for m in sorted(values)]


@dataclass(frozen=True)
class EvaluationItem:
    response_id: str
    prompt: str
    answer: str
    contexts: tuple[str, ...]


def evaluate_all(items: Iterable[EvaluationItem], evaluators: Sequence[Evaluator], max_workers: int = 4) -> list[MetricScore]:
    """Score every item with every evaluator; output sorted by (response_id, metric, evaluator_id)."""
    jobs = [(ev, item) for item in items for ev in evaluators]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        batches = pool.map(lambda job: job[0].evaluate(job[1].response_id, job[1].prompt, job[1].answer, job[1].contexts), jobs)
        scores = [s for batch in batches for s in batch]
    return sorted(scores, key=lambda s: (s.response_id, s.metric, s.evaluator_id))
