"""Question samples and the bag/supervision value types shared across modules."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import ValidationError
from .kg import EntityRef, TripleStore
from .paths import RelationPath

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class QuestionSample:
    """One QA instance: question text, its KG entities, and gold answers.

    ``answers`` holds the gold answers resolvable in the store;
    ``answer_labels`` preserves every gold label from the input file,
    including ones absent from the KG (used for label-level evaluation).
    """

    id: str
    question: str
    question_entities: tuple[EntityRef, ...]
    answers: frozenset[EntityRef]
    answer_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.question.strip():
            raise ValidationError(f"question {self.id!r}: empty question text")
        if not self.question_entities:
            raise ValidationError(f"question {self.id!r}: no question entities")


@dataclass(frozen=True)
class PathBag:
    """A MIL bag: all paths reaching one answer (positive) or one
    non-answer-reaching path (negative singleton)."""

    label: str  # POSITIVE or NEGATIVE
    members: tuple[RelationPath, ...]
    anchor_answer: EntityRef | None = None  # set for positive bags

    def __post_init__(self):
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValidationError(f"bad bag label {self.label!r}")
        if not self.members:
            raise ValidationError("bag has no members")
        if self.label == NEGATIVE and len(self.members) != 1:
            raise ValidationError("negative bags are singletons")


@dataclass(frozen=True)
class PseudoSupervision:
    """Top-scored weakly supervised paths selected as training targets."""

    question_id: str
    paths: tuple[RelationPath, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.paths) != len(self.scores):
            raise ValidationError("paths and scores must be parallel")
        if not self.paths:
            raise ValidationError(f"question {self.question_id!r}: empty supervision")


def load_questions(
    path: Union[str, Path],
    store: TripleStore,
    *,
    inference_only: bool = False,
) -> list[QuestionSample]:
    """Load question JSONL rows ``{"id","question","question_entities","answers"}``.

    Question entities must be interned in the store. Answers missing from the
    store are kept as labels only (they can never be reached by a path, but
    still count for label-level metrics). Empty answer lists are rejected
    unless ``inference_only`` is set.
    """
    samples = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: invalid JSON: {exc}") from None
            samples.append(_sample_from_row(row, store, path, lineno, inference_only, seen_ids))
    return samples


def _sample_from_row(row: dict, store: TripleStore, path, lineno: int,
                     inference_only: bool, seen_ids: set[str]) -> QuestionSample:
    for key in ("id", "question", "question_entities", "answers"):
        if key not in row:
            raise ValidationError(f"{path}: line {lineno}: missing field {key!r}")
    qid = str(row["id"])
    if qid in seen_ids:
        raise ValidationError(f"{path}: line {lineno}: duplicate question id {qid!r}")
    seen_ids.add(qid)

    entities = []
    for label in row["question_entities"]:
        if not store.has_entity(label):
            raise ValidationError(
                f"{path}: line {lineno}: question entity {label!r} is not in the KG"
            )
        entities.append(store.entity(label))

    answer_labels = tuple(str(a) for a in row["answers"])
    if not answer_labels and not inference_only:
        raise ValidationError(f"{path}: line {lineno}: question {qid!r} has no answers")
    resolved = []
    for label in answer_labels:
        if store.has_entity(label):
            resolved.append(store.entity(label))
        else:
            logger.warning("question %s: answer %r is not in the KG", qid, label)

    return QuestionSample(
        id=qid,
        question=str(row["question"]),
        question_entities=tuple(entities),
        answers=frozenset(resolved),
        answer_labels=answer_labels,
    )
