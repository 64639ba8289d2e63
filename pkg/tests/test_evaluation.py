import itertools
import math
from fractions import Fraction

import pytest
from conftest import URL, scripted_gateway
from hypothesis import given
from hypothesis import strategies as st

from climate_scenarios.errors import JudgeParseError, ValidationError
from climate_scenarios.evaluation import (
    EvaluationItem,
    Evaluator,
    MetricScore,
    answer_relevancy_score,
    context_utilization_score,
    evaluate_all,
    faithfulness_score,
    parse_verdict,
)
from climate_scenarios.gateway import ModelRef

JUDGE = ModelRef(URL, "gemma2:2b", "judge")
EMBEDDER = ModelRef(URL, "nomic-embed-text", "embedder")


def cu_formula(v):
    """Literal rank-weighted precision formula, in exact rationals."""
    den = sum(v)
    if den == 0:
        return Fraction(0)
    num = sum(Fraction(sum(v[: k + 1]), k + 1) * v[k] for k in range(len(v)))
    return num / den


class ScriptedJudge:
    """Routes judge prompts by template and replies from fixed scripts."""

    def __init__(self, statements=(), supported=(), questions=(), relevant=()):
        self.statements = list(statements)
        self.supported = dict(supported)
        self.questions = list(questions)
        self.relevant = dict(relevant)

    def __call__(self, body):
        p = body["prompt"]
        if p.startswith("Break the answer"):
            return "\n".join(self.statements)
        if p.startswith("Decide whether"):
            stmt = p.rsplit("Statement:\n", 1)[1]
            return self.supported[stmt]
        if p.startswith("Write "):
            return "\n".join(self.questions)
        if p.startswith("Given the question"):
            ctx = p.rsplit("Context excerpt:\n", 1)[1]
            return self.relevant[ctx]
        raise AssertionError(p)


def evaluator(judge_fn, embed_fn=None):
    kw = {"embed_fn": embed_fn} if embed_fn else {}
    return Evaluator(scripted_gateway(judge_fn, **kw), JUDGE, EMBEDDER, "gemma2-2B")


# --- verdict grammar ------------------------------------------------------


@pytest.mark.parametrize(
    "reply,expected",
    [("yes", True), ("No", False), ("YES. It is stated.", True), ("no, the context is silent", False), ("  yes\nbecause", True)],
)
def test_verdict_grammar_accepts(reply, expected):
    assert parse_verdict(reply)[0] is expected


@pytest.mark.parametrize("reply", ["", "Yesterday", "nope", "The answer is yes", "**Yes**", "maybe"])
def test_verdict_grammar_rejects(reply):
    with pytest.raises(JudgeParseError):
        parse_verdict(reply)


def test_rationale_kept():
    assert parse_verdict("no. The context does not say this.") == (False, "The context does not say this.")


# --- pure formulas --------------------------------------------------------


def test_faithfulness_ratio():
    assert faithfulness_score([True, True, False]) == pytest.approx(2 / 3, abs=1e-12)
    assert faithfulness_score([True] * 4) == 1.0
    with pytest.raises(ValidationError):
        faithfulness_score([])


def test_context_utilization_examples():
    assert context_utilization_score([1, 1, 1]) == 1.0
    assert context_utilization_score([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert context_utilization_score([0, 0, 0]) == 0.0


def test_context_utilization_exhaustive_to_length_12():
    for n in range(1, 13):
        for v in itertools.product((0, 1), repeat=n):
            assert abs(context_utilization_score(v) - float(cu_formula(v))) <= 1e-12


def test_answer_relevancy_clamps_and_averages():
    assert answer_relevancy_score([0.9, 0.8, 0.7]) == pytest.approx(0.8, abs=1e-12)
    assert answer_relevancy_score([-0.2]) == 0.0
    assert answer_relevancy_score([1.0 + 1e-16]) <= 1.0


@given(st.lists(st.booleans(), min_size=1, max_size=30))
def test_metrics_stay_in_unit_interval(v):
    assert 0.0 <= faithfulness_score(v) <= 1.0
    assert 0.0 <= context_utilization_score(v) <= 1.0
    assert Fraction(sum(v), len(v)) == Fraction(faithfulness_score(v)).limit_denominator(len(v))


@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=10))
def test_answer_relevancy_in_unit_interval(cosines):
    assert 0.0 <= answer_relevancy_score(cosines) <= 1.0


def test_metric_score_range_enforced():
    with pytest.raises(ValidationError):
        MetricScore("p01", "human", "faithfulness", 1.2)
    with pytest.raises(ValidationError):
        MetricScore("p01", "human", "coherence", 0.5)


# --- judge-driven metrics -------------------------------------------------


def test_decompose_single_statement():
    ev = evaluator(ScriptedJudge(statements=["Kenya expands geothermal power."]))
    assert ev.decompose_statements("Kenya expands geothermal power.") == ["Kenya expands geothermal power."]


def test_decompose_three_lines():
    ev = evaluator(ScriptedJudge(statements=["a", "b", "c"]))
    assert ev.decompose_statements("long answer") == ["a", "b", "c"]


def test_decompose_errors():
    ev = evaluator(ScriptedJudge(statements=[]))
    with pytest.raises(ValidationError):
        ev.decompose_statements("")
    with pytest.raises(JudgeParseError):
        ev.decompose_statements("answer")


def test_faithfulness_two_of_three():
    judge = ScriptedJudge(statements=["s1", "s2", "s3"], supported={"s1": "yes", "s2": "Yes.", "s3": "no"})
    ev = evaluator(judge)
    assert ev.faithfulness("answer", ["ctx"]) == pytest.approx(0.6666666666666666, abs=1e-12)
    verdict_calls = [c for c in ev.gateway.calls if c["prompt"].startswith("Decide whether")]
    assert len(verdict_calls) == 3
    assert all(c["options"]["temperature"] == 0.0 for c in ev.gateway.calls)


def test_faithfulness_all_supported():
    judge = ScriptedJudge(statements=["s1", "s2"], supported={"s1": "yes", "s2": "yes"})
    assert evaluator(judge).faithfulness("answer", ["ctx"]) == 1.0


def test_faithfulness_unparseable_verdict_raises():
    judge = ScriptedJudge(statements=["s1"], supported={"s1": "probably"})
    with pytest.raises(JudgeParseError):
        evaluator(judge).faithfulness("answer", ["ctx"])


def scripted_cosines(prompt, cosines):
    """Embedder placing the prompt on the x-axis and question i at angle acos(cosines[i])."""
    table = {prompt: (1.0, 0.0)}
    for i, c in enumerate(cosines):
        table[f"q{i}"] = (c, math.sqrt(1 - c * c))
    return lambda text: table[text]


def test_answer_relevancy_scripted_cosines():
    ev = evaluator(ScriptedJudge(questions=["q0", "q1", "q2"]), embed_fn=scripted_cosines("P", [0.9, 0.8, 0.7]))
    assert ev.answer_relevancy("P", "answer") == pytest.approx(0.8, abs=1e-12)


def test_answer_relevancy_clamp_case():
    ev = evaluator(ScriptedJudge(questions=["q0"]), embed_fn=scripted_cosines("P", [-0.2]))
    assert ev.answer_relevancy("P", "answer", n=1) == 0.0


def test_answer_relevancy_prompt_echo_is_one():
    ev = evaluator(ScriptedJudge(questions=["What about solar mini-grids?"] * 3))
    assert ev.answer_relevancy("What about solar mini-grids?", "answer") == pytest.approx(1.0, abs=1e-12)


def test_answer_relevancy_too_few_questions():
    ev = evaluator(ScriptedJudge(questions=["q0"]))
    with pytest.raises(JudgeParseError):
        ev.answer_relevancy("P", "answer", n=3)


def test_context_utilization_verdicts_101():
    judge = ScriptedJudge(relevant={"c1": "yes", "c2": "no", "c3": "yes"})
    assert evaluator(judge).context_utilization("P", "A", ["c1", "c2", "c3"]) == pytest.approx(5 / 6, abs=1e-12)


def test_context_utilization_passes_prompt_and_answer():
    judge = ScriptedJudge(relevant={"c1": "yes"})
    ev = evaluator(judge)
    ev.context_utilization("THE PROMPT", "THE ANSWER", ["c1"])
    prompt = ev.gateway.calls[-1]["prompt"]
    assert "THE PROMPT" in prompt and "THE ANSWER" in prompt


def test_evaluate_all_order_and_ids():
    judge = ScriptedJudge(
        statements=["s1"], supported={"s1": "yes"}, questions=["P", "P", "P"], relevant={"c": "yes"}
    )
    evs = [evaluator(judge), evaluator(judge)]
    evs[1].evaluator_id = "mistral-7B"
    items = [EvaluationItem(rid, "P", "A", ("c",)) for rid in ("p02", "p01")]
    scores = evaluate_all(items, evs)
    assert len(scores) == 2 * 2 * 3
    keys = [(s.response_id, s.metric, s.evaluator_id) for s in scores]
    assert keys == sorted(keys)
    assert {s.evaluator_id for s in scores} == {"gemma2-2B", "mistral-7B"}
