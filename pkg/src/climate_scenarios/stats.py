"""Summary statistics, rank agreement between evaluators, and report rendering."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .evaluation import METRICS, MetricScore
from .jsonl import canonical_json
from .ratings import format_percent

log = logging.getLogger(__name__)

SD_CONVENTION = "sample (n-1)"
DEFAULT_CONSISTENCY_THRESHOLD = 0.11
CV_BANDS = (0.06, 0.11, 0.19)
METRIC_TITLES = {
    "faithfulness": "Faithfulness",
    "answer_relevancy": "Answer Relevancy",
    "context_utilization": "Context Utilization",
}


class DegenerateRankingError(ValidationError):
    """Spearman's rho is undefined because one input has no rank variance."""


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (divisor n - 1)."""
    n = len(values)
    if n == 0:
        raise ValidationError("mean of an empty sequence")
    if n == 1:
        raise ValidationError("standard deviation needs at least two values")
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def consistency_flag(mean: float, sd: float, threshold: float = DEFAULT_CONSISTENCY_THRESHOLD) -> bool:
    if mean <= 0:
        raise ValidationError(f"coefficient of variation needs a positive mean, got {mean}")
    return sd / mean < threshold


def cv_band(cv: float) -> str:
    for edge in CV_BANDS:
        if cv < edge:
            return f"<{edge:.0%}"
    return f">={CV_BANDS[-1]:.0%}"


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the positions they occupy."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for pos in range(i, j + 1):
            ranks[order[pos]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho as the Pearson correlation of average ranks."""
    if len(x) != len(y):
        raise ValidationError(f"length mismatch: {len(x)} != {len(y)}")
    if len(x) < 2:
        raise ValidationError("spearman needs at least two observations")
    rx, ry = average_ranks(x), average_ranks(y)
    mx, my = math.fsum(rx) / len(rx), math.fsum(ry) / len(ry)
    dx = [r - mx for r in rx]
    dy = [r - my for r in ry]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise DegenerateRankingError("constant input: ranks have zero variance")
    rho = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


def evaluator_order(ids: Iterable[str]) -> list[str]:
    return sorted(set(ids), key=lambda e: (e != "human", e))


@dataclass
class ScoreMatrix:
    scores: dict[tuple[str, str, str], float] = field(default_factory=dict)

    def add(self, score: MetricScore) -> None:
        key = (score.evaluator_id, score.response_id, score.metric)
        if key in self.scores:
            raise ValidationError(f"duplicate score for {key}")
        self.scores[key] = score.value

    @classmethod
    def from_scores(cls, scores: Iterable[MetricScore]) -> ScoreMatrix:
        m = cls()
        for s in scores:
            m.add(s)
        return m

    def evaluators(self) -> list[str]:
        return evaluator_order(e for e, _, _ in self.scores)

    def column(self, evaluator_id: str, metric: str) -> dict[str, float]:
        return {r: v for (e, r, m), v in self.scores.items() if e == evaluator_id and m == metric}

    def restrict(self, response_ids: Iterable[str]) -> ScoreMatrix:
        keep = set(response_ids)
        return ScoreMatrix({k: v for k, v in self.scores.items() if k[1] in keep})


@dataclass(frozen=True)
class SummaryRow:
    evaluator_id: str
    metric: str
    n: int
    mean: float
    sd: float
    cv: float | None
    consistent: bool
    band: str


@dataclass(frozen=True)
class CorrelationRow:
    evaluator_a: str
    evaluator_b: str
    metric: str
    rho: float
    n: int

    @property
    def evaluator_pair(self) -> tuple[str, str]:
        return self.evaluator_a, self.evaluator_b


def summarize(matrix: ScoreMatrix, threshold: float = DEFAULT_CONSISTENCY_THRESHOLD) -> list[SummaryRow]:
    rows = []
    for ev in matrix.evaluators():
        for metric in METRICS:
            col = matrix.column(ev, metric)
            if len(col) < 2:
                if col:
                    log.warning("%s/%s: only %d score, no SD", ev, metric, len(col))
                continue
            mean, sd = mean_sd([col[r] for r in sorted(col)])
            if mean > 0:
                cv = sd / mean
                rows.append(SummaryRow(ev, metric, len(col), mean, sd, cv, consistency_flag(mean, sd, threshold), cv_band(cv)))
            else:
                rows.append(SummaryRow(ev, metric, len(col), mean, sd, None, False, "n/a"))
    return rows


def correlation_table(matrix: ScoreMatrix) -> list[CorrelationRow]:
    """One row per unordered evaluator pair per metric with identical response sets."""
    rows = []
    evaluators = matrix.evaluators()
    for metric in METRICS:
        for a, b in combinations(evaluators, 2):
            ca, cb = matrix.column(a, metric), matrix.column(b, metric)
            if not ca or not cb:
                continue
            if set(ca) != set(cb):
                log.warning("skipping %s vs %s on %s: response sets differ", a, b, metric)
                continue
            ids = sorted(ca)
            try:
                rho = spearman([ca[r] for r in ids], [cb[r] for r in ids])
            except ValidationError as exc:
                log.warning("skipping %s vs %s on %s: %s", a, b, metric, exc)
                continue
            rows.append(CorrelationRow(a, b, metric, rho, len(ids)))
    return rows


def fmt3(x: float) -> str:
    """Round half-up to three decimals."""
    return str(Decimal(repr(x)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def mean_sd_cell(mean: float, sd: float) -> str:
    return f"{fmt3(mean)} ± {fmt3(sd)}"


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
    return [fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]


def render_report(
    summary: Sequence[SummaryRow],
    correlations: Sequence[CorrelationRow],
    validation: tuple[int, int] | None = None,
    metadata: Mapping | None = None,
    threshold: float = DEFAULT_CONSISTENCY_THRESHOLD,
) -> tuple[str, dict]:
    """Render (plain text, machine-readable dict). Text is rounded; the dict keeps full precision."""
    lines = ["Scenario evaluation report", "==========================", ""]
    data: dict = {
        "summary": [asdict(r) for r in summary],
        "correlations": [asdict(r) for r in correlations],
        "sd_convention": SD_CONVENTION,
        "consistency_threshold": threshold,
        "metadata": dict(metadata or {}),
    }
    if validation is not None:
        valid, total = validation
        pct = format_percent(valid / total) if total else "n/a"
        lines += [f"Validation: {valid} of {total} responses valid ({pct})", ""]
        data["validation"] = {"valid": valid, "total": total, "rate": valid / total if total else None, "percent": pct}

    cells = {(r.evaluator_id, r.metric): r for r in summary}
    evaluators = evaluator_order(r.evaluator_id for r in summary)
    head = ["Evaluator", *(METRIC_TITLES[m] for m in METRICS)]
    lines.append("Mean scores (± SD)")
    lines += _table(head, [[ev, *(mean_sd_cell(cells[ev, m].mean, cells[ev, m].sd) if (ev, m) in cells else "n/a" for m in METRICS)] for ev in evaluators])
    lines += ["", f"Dispersion (SD / mean); consistent when below {threshold:g}"]

    def disp(row: SummaryRow | None) -> str:
        if row is None or row.cv is None:
            return "n/a"
        return f"{fmt3(row.cv)} {row.band} {'consistent' if row.consistent else 'variable'}"

    lines += _table(head, [[ev, *(disp(cells.get((ev, m))) for m in METRICS)] for ev in evaluators])
    lines += ["", f"SD convention: {SD_CONVENTION}", ""]

    if correlations:
        pairs = list(dict.fromkeys(r.evaluator_pair for r in correlations))
        rho = {(r.evaluator_pair, r.metric): r.rho for r in correlations}
        lines.append("Spearman correlation between evaluator pairs")
        lines += _table(
            ["Evaluator pair", *(METRIC_TITLES[m] for m in METRICS)],
            [[f"{a} vs {b}", *(fmt3(rho[(a, b), m]) if ((a, b), m) in rho else "n/a" for m in METRICS)] for a, b in pairs],
        )
    else:
        lines.append("Spearman correlation: not available (no evaluator pair shares a complete, non-constant response set)")

    if metadata:
        lines += ["", "Provenance", *(f"  {k}: {canonical_json(v) if isinstance(v, (dict, list)) else v}" for k, v in sorted(metadata.items()))]
    return "\n".join(lines) + "\n", data
