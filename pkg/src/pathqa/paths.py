"""Relation-path space: enumeration, reachability, weak supervision, grounding.

All operations are pure functions over an immutable :class:`TripleStore` and
return deterministically ordered results, so per-question work can run in
parallel without shared state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import ValidationError
from .kg import EntityRef, RelationRef, TripleStore

if TYPE_CHECKING:  # pragma: no cover
    from .samples import QuestionSample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationPath:
    """An ordered relation sequence; equality is order-sensitive."""

    relations: tuple[RelationRef, ...]

    def __post_init__(self):
        if not self.relations:
            raise ValidationError("relation paths must have length >= 1")

    @property
    def length(self) -> int:
        return len(self.relations)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(r.label for r in self.relations)

    @property
    def relation_ids(self) -> tuple[int, ...]:
        return tuple(r.id for r in self.relations)

    @classmethod
    def from_labels(cls, store: TripleStore, labels: Sequence[str]) -> "RelationPath":
        return cls(tuple(store.relation(label) for label in labels))

    def __repr__(self):
        return f"RelationPath({' -> '.join(self.labels)})"


@dataclass(frozen=True)
class GroundedEvidence:
    """A grounded reasoning trace: start entity, path, and the reachable ends.

    ``ends`` is nonempty by construction (empty groundings carry no
    information and are dropped) and sorted by entity id.
    """

    start: EntityRef
    path: RelationPath
    ends: tuple[EntityRef, ...]

    def __post_init__(self):
        if not self.ends:
            raise ValidationError("grounded evidence must have a nonempty end set")


def reachable_entities(store: TripleStore, start: EntityRef, path: RelationPath) -> frozenset[EntityRef]:
    """All entities reachable from ``start`` by following ``path`` in order."""
    store.check_entity(start)
    for rel in path.relations:
        store.check_relation(rel)
    frontier = {start.id}
    for rel in path.relations:
        nxt: set[int] = set()
        for eid in frontier:
            nxt.update(store.neighbor_ids(eid, rel.id))
        if not nxt:
            return frozenset()
        frontier = nxt
    return frozenset(store.entity_by_id(eid) for eid in frontier)


def enumerate_candidate_paths(
    store: TripleStore,
    starts: Iterable[EntityRef],
    max_hop: int,
    *,
    max_candidates: int | None = None,
) -> list[RelationPath]:
    """Breadth-first enumeration of all relation sequences of length 1..max_hop
    realizable from at least one start entity.

    Paths are question-level objects: sequences are deduplicated across start
    entities. Entity revisits along a witness chain are allowed; only the hop
    budget bounds the walk. Output order is BFS discovery order (deterministic).

    ``max_candidates`` caps the result for pathological hub entities; hitting
    the cap truncates enumeration and logs a warning.
    """
    paths, truncated = enumerate_candidate_paths_with_stats(
        store, starts, max_hop, max_candidates=max_candidates
    )
    if truncated:
        logger.warning("candidate enumeration truncated at %d paths", len(paths))
    return paths


def enumerate_candidate_paths_with_stats(
    store: TripleStore,
    starts: Iterable[EntityRef],
    max_hop: int,
    *,
    max_candidates: int | None = None,
) -> tuple[list[RelationPath], bool]:
    """Like :func:`enumerate_candidate_paths`, also reporting cap truncation."""
    if max_hop < 1:
        raise ValidationError(f"max_hop must be >= 1, got {max_hop}")
    start_ids = sorted({store.check_entity(e) for e in starts})
    if not start_ids:
        raise ValidationError("no start entities given")

    collected: list[tuple[int, ...]] = []
    # frontier maps a relation-id sequence to the entity set reachable via it
    frontier: dict[tuple[int, ...], frozenset[int]] = {(): frozenset(start_ids)}
    truncated = False
    for _hop in range(max_hop):
        nxt: dict[tuple[int, ...], frozenset[int]] = {}
        for seq, ents in frontier.items():
            out_rels = sorted({r for eid in ents for r in store.outgoing_relation_ids(eid)})
            for rid in out_rels:
                reached = frozenset(
                    t for eid in ents for t in store.neighbor_ids(eid, rid)
                )
                if not reached:
                    continue
                new_seq = seq + (rid,)
                nxt[new_seq] = reached
                collected.append(new_seq)
                if max_candidates is not None and len(collected) >= max_candidates:
                    truncated = True
                    break
            if truncated:
                break
        if truncated or not nxt:
            break
        frontier = nxt

    paths = [
        RelationPath(tuple(store.relation_by_id(rid) for rid in seq)) for seq in collected
    ]
    return paths, truncated


def weakly_supervised_paths(
    store: TripleStore,
    sample: "QuestionSample",
    candidates: Iterable[RelationPath],
) -> list[RelationPath]:
    """Candidates that reach at least one gold answer from some question entity.

    Preserves candidate order. An empty result is valid and flags the sample
    as untrainable downstream.
    """
    answer_ids = {a.id for a in sample.answers}
    result = []
    for path in candidates:
        for entity in sample.question_entities:
            reached = reachable_entities(store, entity, path)
            if any(e.id in answer_ids for e in reached):
                result.append(path)
                break
    return result


def ground_paths(
    store: TripleStore,
    question_entities: Iterable[EntityRef],
    paths: Sequence[RelationPath],
) -> list[GroundedEvidence]:
    """Ground generated paths into evidence triples (start, path, ends).

    One evidence item per (entity, path) pair with a nonempty reachable set;
    paths are visited in input order and entities in stable id order, and
    empty groundings are dropped.
    """
    entities = sorted({store.check_entity(e): e for e in question_entities}.items())
    evidence = []
    for path in paths:
        for _eid, entity in entities:
            ends = reachable_entities(store, entity, path)
            if ends:
                evidence.append(
                    GroundedEvidence(
                        start=entity,
                        path=path,
                        ends=tuple(sorted(ends, key=lambda e: e.id)),
                    )
                )
    return evidence
