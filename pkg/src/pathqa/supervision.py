"""Bag construction and pseudo-supervision selection from answer-level labels.

Positive bags group all candidate paths that reach one gold answer; every
candidate that reaches no answer becomes a singleton negative. Negatives are
partitioned into four structural classes relative to the weakly supervised
paths and sampled under a fixed budget, keeping the hardest (most
question-similar) candidates per class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .artifacts import derive_seed
from .embeddings import EmbeddingProvider, question_path_similarity
from .errors import PathQAError, ValidationError
from .estimator import PathScore
from .kg import TripleStore
from .paths import RelationPath, reachable_entities
from .samples import NEGATIVE, POSITIVE, PathBag, PseudoSupervision, QuestionSample

logger = logging.getLogger(__name__)

TRUNCATED = "truncated"
EXTENDED = "extended"
DEVIATED = "deviated"
OTHER = "other"
NEGATIVE_CLASSES = (TRUNCATED, EXTENDED, DEVIATED, OTHER)


class SupervisionError(PathQAError):
    """Raised for unbuildable bags or unsupervisable questions."""


@dataclass
class NegativeSamplingConfig:
    """Budgeted negative sampling: keep at most ``n_max`` paths per question
    (weak positives reserved first), split across the four negative classes."""

    n_max: int = 1000
    rho_truncated: float = 0.1
    rho_extended: float = 0.4
    rho_deviated: float = 0.3
    rho_other: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        rhos = (self.rho_truncated, self.rho_extended, self.rho_deviated, self.rho_other)
        if any(r < 0 for r in rhos):
            raise ValidationError("negative-class proportions must be nonnegative")
        if abs(sum(rhos) - 1.0) > 1e-9:
            raise ValidationError(f"negative-class proportions must sum to 1, got {sum(rhos)}")
        if self.n_max < 0:
            raise ValidationError("n_max must be nonnegative")

    def quotas(self, n_weak: int) -> tuple[int, dict[str, int]]:
        """Negative budget and per-class quotas for a question with ``n_weak``
        weakly supervised paths; the rounding remainder goes to `other`."""
        self.validate()
        n_neg = max(0, self.n_max - n_weak)
        n_trunc = int(self.rho_truncated * n_neg)
        n_ext = int(self.rho_extended * n_neg)
        n_dev = int(self.rho_deviated * n_neg)
        n_other = n_neg - n_trunc - n_ext - n_dev
        return n_neg, {TRUNCATED: n_trunc, EXTENDED: n_ext, DEVIATED: n_dev, OTHER: n_other}


# -- bag construction ----------------------------------------------------------


def build_bags(
    store: TripleStore,
    sample: QuestionSample,
    candidates: Sequence[RelationPath],
    *,
    reachable: Callable = reachable_entities,
) -> tuple[list[PathBag], list[RelationPath]]:
    """Group candidates into per-answer positive bags and the negative path set.

    A candidate joins the bag of answer ``a`` when it reaches ``a`` from at
    least one question entity; candidates reaching no answer are returned as
    negatives (later sampled into singleton bags). Answers reached by no
    candidate yield no bag and are logged.
    """
    answer_ids = {a.id for a in sample.answers}
    reached_answers: list[set[int]] = []
    for path in candidates:
        hit: set[int] = set()
        for entity in sample.question_entities:
            ends = reachable(store, entity, path)
            hit.update(e.id for e in ends if e.id in answer_ids)
        reached_answers.append(hit)

    positive_bags = []
    for answer in sorted(sample.answers, key=lambda a: a.id):
        members = tuple(
            path for path, hit in zip(candidates, reached_answers) if answer.id in hit
        )
        if not members:
            logger.info("question %s: answer %r reached by no candidate path", sample.id, answer.label)
            continue
        positive_bags.append(PathBag(label=POSITIVE, members=members, anchor_answer=answer))

    negatives = [path for path, hit in zip(candidates, reached_answers) if not hit]
    return positive_bags, negatives


# -- negative classification and sampling ---------------------------------------


def _common_prefix_len(a: tuple[int, ...], b: tuple[int, ...]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def classify_negatives(
    weak_positive: Iterable[RelationPath],
    negatives: Iterable[RelationPath],
) -> dict[str, list[RelationPath]]:
    """Partition negatives into truncated / extended / deviated / other.

    Classes are evaluated in that priority order, so a path matching several
    definitions lands in the first one. ``truncated`` negatives are proper
    prefixes of a weak path; ``extended`` negatives have a weak path as a
    proper prefix; ``deviated`` negatives share a nonempty prefix with a weak
    path and then follow a different relation.
    """
    weak_ids = [w.relation_ids for w in weak_positive]
    weak_set = set(weak_ids)
    partition: dict[str, list[RelationPath]] = {cls: [] for cls in NEGATIVE_CLASSES}
    for neg in negatives:
        ids = neg.relation_ids
        if ids in weak_set:
            raise ValidationError(f"negative path {neg!r} is also weakly supervised")
        cls = OTHER
        if any(len(ids) < len(w) and w[: len(ids)] == ids for w in weak_ids):
            cls = TRUNCATED
        elif any(len(w) < len(ids) and ids[: len(w)] == w for w in weak_ids):
            cls = EXTENDED
        else:
            for w in weak_ids:
                c = _common_prefix_len(ids, w)
                if 0 < c < len(ids) and c < len(w):
                    cls = DEVIATED
                    break
        partition[cls].append(neg)
    return partition


def _similarity_ranked(
    paths: Sequence[RelationPath],
    h_q: np.ndarray,
    provider: EmbeddingProvider,
) -> list[RelationPath]:
    def sort_key(path: RelationPath):
        sim = question_path_similarity(h_q, [provider.embed(lbl) for lbl in path.labels])
        return (-sim, path.length, path.relation_ids)

    return sorted(paths, key=sort_key)


def sample_negatives(
    config: NegativeSamplingConfig,
    weak_positive: Sequence[RelationPath],
    partition: Mapping[str, Sequence[RelationPath]],
    h_q: np.ndarray,
    provider: EmbeddingProvider,
    *,
    question_id: str = "",
) -> list[RelationPath]:
    """Retain at most the per-class quota of negatives.

    Over-quota classes keep the top paths by question-path similarity.
    `other` slots prefer paths sharing relation ids with the weak positives
    (more shared ids first), then fill by seeded random sampling; the random
    substream is derived from (seed, question id) so parallel per-question
    sampling stays deterministic. Quota shortfalls in one class are not
    redistributed to the others.
    """
    n_neg, quotas = config.quotas(len(weak_positive))
    if n_neg == 0:
        return []
    retained: list[RelationPath] = []
    for cls in (TRUNCATED, EXTENDED, DEVIATED):
        pool = list(partition.get(cls, ()))
        quota = quotas[cls]
        if len(pool) > quota:
            pool = _similarity_ranked(pool, h_q, provider)[:quota]
        retained.extend(pool)

    other_pool = list(partition.get(OTHER, ()))
    quota = quotas[OTHER]
    if len(other_pool) <= quota:
        retained.extend(other_pool)
    else:
        weak_relation_ids = {rid for w in weak_positive for rid in w.relation_ids}

        def overlap(path: RelationPath) -> int:
            return len(set(path.relation_ids) & weak_relation_ids)

        overlapping = sorted(
            (p for p in other_pool if overlap(p) > 0),
            key=lambda p: (-overlap(p), p.length, p.relation_ids),
        )
        chosen = overlapping[:quota]
        remaining_slots = quota - len(chosen)
        if remaining_slots > 0:
            chosen_set = set(chosen)
            rest = sorted(
                (p for p in other_pool if p not in chosen_set),
                key=lambda p: (p.length, p.relation_ids),
            )
            rng = np.random.default_rng(derive_seed(config.seed, question_id))
            picked = rng.choice(len(rest), size=remaining_slots, replace=False)
            chosen.extend(rest[i] for i in sorted(picked))
        retained.extend(chosen)
    return retained


def negative_bags(paths: Iterable[RelationPath]) -> list[PathBag]:
    """Wrap sampled negative paths into singleton bags."""
    return [PathBag(label=NEGATIVE, members=(path,)) for path in paths]


# -- top-T selection and the distillation target ---------------------------------


def select_pseudo_supervision(
    question_id: str,
    scores: Sequence[PathScore],
    top_t: int,
) -> PseudoSupervision:
    """The top-T scored weakly supervised paths, ties broken by (shorter
    length, then lexicographic relation ids) for determinism."""
    if top_t < 1:
        raise ValidationError(f"top_t must be >= 1, got {top_t}")
    if not scores:
        raise SupervisionError(
            f"question {question_id!r} has no weakly supervised paths; it cannot be supervised"
        )
    ranked = sorted(scores, key=lambda ps: (-ps.score, ps.path.length, ps.path.relation_ids))
    chosen = ranked[: min(top_t, len(ranked))]
    return PseudoSupervision(
        question_id=question_id,
        paths=tuple(ps.path for ps in chosen),
        scores=tuple(ps.score for ps in chosen),
    )


def target_distribution(supervision: PseudoSupervision) -> dict[RelationPath, float]:
    """Hard target for distillation: uniform mass over the selected paths."""
    mass = 1.0 / len(supervision.paths)
    return {path: mass for path in supervision.paths}


# -- whole-question assembly (used by the CLI build-bags stage) -------------------


@dataclass
class BagAssembly:
    sample: QuestionSample
    positive_bags: list[PathBag]
    negative_bags: list[PathBag]
    weak_positive: list[RelationPath]
    uncovered_answers: list[str]


def assemble_question_bags(
    store: TripleStore,
    sample: QuestionSample,
    candidates: Sequence[RelationPath],
    weak_positive: Sequence[RelationPath],
    sampling: NegativeSamplingConfig,
    provider: EmbeddingProvider,
) -> BagAssembly:
    """Full per-question bag pipeline: bags, negative partition, budgeted sample."""
    positive, negative_paths = build_bags(store, sample, candidates)
    partition = classify_negatives(weak_positive, negative_paths)
    h_q = provider.embed(sample.question)
    sampled = sample_negatives(
        sampling, list(weak_positive), partition, h_q, provider, question_id=sample.id
    )
    covered = {bag.anchor_answer.id for bag in positive if bag.anchor_answer is not None}
    uncovered = [a.label for a in sorted(sample.answers, key=lambda a: a.id) if a.id not in covered]
    return BagAssembly(
        sample=sample,
        positive_bags=positive,
        negative_bags=negative_bags(sampled),
        weak_positive=list(weak_positive),
        uncovered_answers=uncovered,
    )
