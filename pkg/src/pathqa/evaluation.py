"""Answer-set metrics, failure taxonomy, and efficiency aggregation.

All entity matching is exact string comparison after case-folding and
whitespace collapsing. F1 is macro-averaged over questions; questions with
an empty gold set are excluded and counted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError

logger = logging.getLogger(__name__)

PATH_GENERATION = "path_generation"
REASONING = "reasoning"
NO_FAILURE = "none"


def normalize_answer(text: str) -> str:
    """Case-fold and collapse whitespace for entity matching."""
    return " ".join(str(text).split()).casefold()


def f1_score(predicted: Iterable[str], gold: Iterable[str]) -> float:
    """Set F1 = 2PR/(P+R); 0 when the prediction is empty or disjoint from gold.

    Inputs are compared as given; normalize beforehand for label matching.
    """
    pred = set(predicted)
    gold = set(gold)
    if not gold:
        raise ValidationError("f1_score requires a nonempty gold set")
    if not pred:
        return 0.0
    overlap = len(pred & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def hit(predicted: Iterable[str], gold: Iterable[str]) -> int:
    """1 iff any gold answer appears in the predicted set."""
    gold = set(gold)
    if not gold:
        raise ValidationError("hit requires a nonempty gold set")
    return int(bool(set(predicted) & gold))


def hits_at_1(predicted: Sequence[str], gold: Iterable[str]) -> int:
    """1 iff the first predicted answer is correct; 0 for empty predictions."""
    gold = set(gold)
    if not gold:
        raise ValidationError("hits_at_1 requires a nonempty gold set")
    if not predicted:
        return 0
    return int(predicted[0] in gold)


@dataclass(frozen=True)
class QuestionResult:
    """Everything needed to score one question.

    ``grounded_ends`` is the union of end-entity labels over the question's
    grounded evidence and is recorded even when the prediction is empty, so
    failures can be attributed to path generation vs reasoning.
    """

    id: str
    predicted: tuple[str, ...]
    gold: tuple[str, ...]
    grounded_ends: tuple[str, ...] = ()
    usage: Mapping[str, Mapping[str, float]] = field(default_factory=dict)


def classify_failure(result: QuestionResult) -> str:
    """Attribute a Hit=0 question to path generation or reasoning.

    If no grounded end entity matches gold, the generated paths never
    retrieved the answer (path generation error); otherwise the evidence
    contained it and the model missed it (reasoning error).
    """
    gold = {normalize_answer(a) for a in result.gold}
    predicted = {normalize_answer(a) for a in result.predicted}
    if gold & predicted:
        return NO_FAILURE
    grounded = {normalize_answer(a) for a in result.grounded_ends}
    return REASONING if gold & grounded else PATH_GENERATION


@dataclass
class MetricReport:
    """Macro metrics over a result set plus the Hit=0 error breakdown."""

    n: int
    f1: float
    hit: float
    hits_at_1: float
    error_breakdown: dict[str, int]
    excluded_empty_gold: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "f1": self.f1,
            "hit": self.hit,
            "hits_at_1": self.hits_at_1,
            "error_breakdown": dict(self.error_breakdown),
            "excluded_empty_gold": self.excluded_empty_gold,
        }

    def render_table(self) -> str:
        lines = [
            f"{'questions':<22}{self.n}",
            f"{'F1 (macro)':<22}{self.f1:.4f}",
            f"{'Hit':<22}{self.hit:.4f}",
            f"{'Hits@1':<22}{self.hits_at_1:.4f}",
            f"{'path-generation errs':<22}{self.error_breakdown.get(PATH_GENERATION, 0)}",
            f"{'reasoning errs':<22}{self.error_breakdown.get(REASONING, 0)}",
            f"{'excluded (no gold)':<22}{self.excluded_empty_gold}",
        ]
        return "\n".join(lines)


def evaluate_results(results: Sequence[QuestionResult]) -> MetricReport:
    """Compute macro F1 / Hit / Hits@1 and partition the Hit=0 failures."""
    f1_total = 0.0
    hit_total = 0
    hits1_total = 0
    breakdown = {PATH_GENERATION: 0, REASONING: 0}
    excluded = 0
    n = 0
    for result in results:
        gold = {normalize_answer(a) for a in result.gold if normalize_answer(a)}
        if not gold:
            excluded += 1
            continue
        n += 1
        predicted_list = [normalize_answer(a) for a in result.predicted]
        predicted = set(predicted_list)
        f1_total += f1_score(predicted, gold)
        question_hit = hit(predicted, gold)
        hit_total += question_hit
        hits1_total += hits_at_1(predicted_list, gold)
        if not question_hit:
            breakdown[classify_failure(result)] += 1
    if n == 0:
        return MetricReport(0, 0.0, 0.0, 0.0, breakdown, excluded)
    return MetricReport(
        n=n,
        f1=f1_total / n,
        hit=hit_total / n,
        hits_at_1=hits1_total / n,
        error_breakdown=breakdown,
        excluded_empty_gold=excluded,
    )


def supervision_hits_at_t(
    selected: Mapping[str, Sequence[Sequence[str]]],
    reference: Mapping[str, Iterable[Sequence[str]]],
    top_t: int,
) -> tuple[float, int, list[str]]:
    """Fraction of questions whose top-T selected paths contain a reference path.

    Paths compare by exact relation-label sequence. Questions without a
    reference entry are excluded with a warning; returns (fraction,
    evaluated count, missing ids).
    """
    if top_t < 1:
        raise ValidationError("top_t must be >= 1")
    hits = 0
    evaluated = 0
    missing: list[str] = []
    for qid, paths in selected.items():
        if qid not in reference:
            missing.append(qid)
            continue
        refs = {tuple(p) for p in reference[qid]}
        evaluated += 1
        top = [tuple(p) for p in paths[:top_t]]
        if any(p in refs for p in top):
            hits += 1
    if missing:
        logger.warning("supervision eval: %d questions lack reference paths", len(missing))
    fraction = hits / evaluated if evaluated else 0.0
    return fraction, evaluated, missing


def efficiency_report(results: Sequence[QuestionResult]) -> dict[str, dict[str, float]]:
    """Per-stage means of wall seconds, call counts, and token counts."""
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for result in results:
        for stage, stats in result.usage.items():
            agg = sums.setdefault(
                stage, {"seconds": 0.0, "calls": 0.0, "input_tokens": 0.0, "output_tokens": 0.0}
            )
            counts[stage] = counts.get(stage, 0) + 1
            for key in agg:
                agg[key] += float(stats.get(key, 0.0))
    return {
        stage: {key: value / counts[stage] for key, value in agg.items()}
        for stage, agg in sums.items()
    }
