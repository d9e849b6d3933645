"""Knowledge graph triple store.

Entities and relations are interned to dense integer ids in first-occurrence
order, and triples are indexed by (head, relation) for fast forward traversal.
A store is write-once: it is assembled by a loader and immutable afterwards,
so it can be shared freely across threads.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, TextIO, Union

from .errors import PathQAError

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"PQKG"
SNAPSHOT_VERSION = 1


class StoreError(PathQAError):
    """Raised for malformed triple files or unknown entity/relation ids."""


@dataclass(frozen=True)
class EntityRef:
    """Interned entity: dense id plus the original surface label."""

    id: int
    label: str
    is_literal: bool = False


@dataclass(frozen=True)
class RelationRef:
    """Interned relation: dense id plus the original surface label."""

    id: int
    label: str


class TripleStore:
    """Immutable directed multigraph over interned entities and relations.

    Adjacency maps (head id, relation id) to the sorted tuple of tail ids.
    Edges are traversed in their stored direction only; datasets that need
    inverse edges must materialize them in the input file.
    """

    def __init__(
        self,
        entity_labels: list[str],
        relation_labels: list[str],
        triples: set[tuple[int, int, int]],
        literal_ids: set[int] | None = None,
    ):
        self._entity_labels = list(entity_labels)
        self._relation_labels = list(relation_labels)
        self._entity_ids = {label: i for i, label in enumerate(self._entity_labels)}
        self._relation_ids = {label: i for i, label in enumerate(self._relation_labels)}
        if len(self._entity_ids) != len(self._entity_labels):
            raise StoreError("duplicate entity labels in store table")
        if len(self._relation_ids) != len(self._relation_labels):
            raise StoreError("duplicate relation labels in store table")
        self._literal_ids = frozenset(literal_ids or ())

        ne, nr = len(self._entity_labels), len(self._relation_labels)
        for h, r, t in triples:
            if not (0 <= h < ne and 0 <= r < nr and 0 <= t < ne):
                raise StoreError(f"triple ({h},{r},{t}) references an unknown id")
        self._triples = frozenset(triples)

        adjacency: dict[tuple[int, int], list[int]] = {}
        head_relations: dict[int, set[int]] = {}
        for h, r, t in self._triples:
            adjacency.setdefault((h, r), []).append(t)
            head_relations.setdefault(h, set()).add(r)
        self._adjacency = {key: tuple(sorted(tails)) for key, tails in adjacency.items()}
        self._head_relations = {h: tuple(sorted(rs)) for h, rs in head_relations.items()}

    # -- vocabulary ---------------------------------------------------------

    @property
    def num_entities(self) -> int:
        return len(self._entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self._relation_labels)

    @property
    def num_triples(self) -> int:
        return len(self._triples)

    def has_entity(self, label: str) -> bool:
        return label in self._entity_ids

    def has_relation(self, label: str) -> bool:
        return label in self._relation_ids

    def entity(self, label: str) -> EntityRef:
        try:
            eid = self._entity_ids[label]
        except KeyError:
            raise StoreError(f"unknown entity label: {label!r}") from None
        return EntityRef(eid, label, eid in self._literal_ids)

    def relation(self, label: str) -> RelationRef:
        try:
            rid = self._relation_ids[label]
        except KeyError:
            raise StoreError(f"unknown relation label: {label!r}") from None
        return RelationRef(rid, label)

    def entity_by_id(self, eid: int) -> EntityRef:
        if not 0 <= eid < len(self._entity_labels):
            raise StoreError(f"unknown entity id: {eid}")
        return EntityRef(eid, self._entity_labels[eid], eid in self._literal_ids)

    def relation_by_id(self, rid: int) -> RelationRef:
        if not 0 <= rid < len(self._relation_labels):
            raise StoreError(f"unknown relation id: {rid}")
        return RelationRef(rid, self._relation_labels[rid])

    def entities(self) -> Iterator[EntityRef]:
        for eid in range(len(self._entity_labels)):
            yield self.entity_by_id(eid)

    def relations(self) -> Iterator[RelationRef]:
        for rid in range(len(self._relation_labels)):
            yield self.relation_by_id(rid)

    def triples(self) -> Iterator[tuple[EntityRef, RelationRef, EntityRef]]:
        for h, r, t in sorted(self._triples):
            yield self.entity_by_id(h), self.relation_by_id(r), self.entity_by_id(t)

    # -- adjacency ----------------------------------------------------------

    def check_entity(self, e: EntityRef) -> int:
        if not 0 <= e.id < len(self._entity_labels) or self._entity_labels[e.id] != e.label:
            raise StoreError(f"entity {e!r} is not interned in this store")
        return e.id

    def check_relation(self, r: RelationRef) -> int:
        if not 0 <= r.id < len(self._relation_labels) or self._relation_labels[r.id] != r.label:
            raise StoreError(f"relation {r!r} is not interned in this store")
        return r.id

    def neighbor_ids(self, head_id: int, relation_id: int) -> tuple[int, ...]:
        """Tail ids of all triples (head_id, relation_id, *), sorted. No id checks."""
        return self._adjacency.get((head_id, relation_id), ())

    def neighbors(self, e: EntityRef, r: RelationRef) -> frozenset[EntityRef]:
        """Entities reachable from ``e`` in one hop over ``r``.

        Distinguishes "no such edge" (empty set) from "no such entity/relation"
        (StoreError).
        """
        eid = self.check_entity(e)
        rid = self.check_relation(r)
        return frozenset(self.entity_by_id(t) for t in self.neighbor_ids(eid, rid))

    def outgoing_relation_ids(self, head_id: int) -> tuple[int, ...]:
        return self._head_relations.get(head_id, ())

    def outgoing_relations(self, e: EntityRef) -> frozenset[RelationRef]:
        """Relations with at least one edge leaving ``e``."""
        eid = self.check_entity(e)
        return frozenset(self.relation_by_id(r) for r in self.outgoing_relation_ids(eid))

    def has_triple(self, h: EntityRef, r: RelationRef, t: EntityRef) -> bool:
        return (self.check_entity(h), self.check_relation(r), self.check_entity(t)) in self._triples

    # -- snapshots ----------------------------------------------------------

    def save(self, path: Union[str, Path], *, stage: str = "ingest", config_hash: str = "") -> None:
        """Write a binary snapshot (magic header + format version) atomically."""
        from .artifacts import atomic_write

        header = {
            "artifact": "triple-store",
            "format_version": SNAPSHOT_VERSION,
            "stage": stage,
            "config_hash": config_hash,
            "entities": self._entity_labels,
            "relations": self._relation_labels,
            "literal_ids": sorted(self._literal_ids),
            "triple_count": len(self._triples),
        }
        header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
        body = b"".join(struct.pack("<3I", h, r, t) for h, r, t in sorted(self._triples))
        with atomic_write(path, binary=True) as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<I", SNAPSHOT_VERSION))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(body)

    @classmethod
    def load(cls, path: Union[str, Path]) -> tuple["TripleStore", dict]:
        """Load a snapshot written by :meth:`save`; returns (store, header)."""
        raw = Path(path).read_bytes()
        if raw[:4] != SNAPSHOT_MAGIC:
            raise StoreError(f"{path}: not a triple-store snapshot (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != SNAPSHOT_VERSION:
            raise StoreError(f"{path}: unsupported snapshot version {version}")
        (header_len,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
        body = raw[12 + header_len :]
        count = header["triple_count"]
        if len(body) != 12 * count:
            raise StoreError(f"{path}: snapshot body is truncated")
        triples = {struct.unpack_from("<3I", body, 12 * i) for i in range(count)}
        store = cls(
            header["entities"],
            header["relations"],
            triples,
            set(header.get("literal_ids", ())),
        )
        return store, header


def load_triples(source: Union[str, Path, TextIO], *, literal_tails: bool = False) -> TripleStore:
    """Load a store from tab-separated ``head<TAB>relation<TAB>tail`` lines.

    Duplicate lines are deduplicated; blank lines are skipped; any other
    malformed line (wrong field count, empty field) raises
    :class:`StoreError` naming the line number. Ids are assigned in
    first-occurrence order, so loading the same bytes always produces the
    same id assignment.

    With ``literal_tails`` set, tail labels never seen in head position are
    flagged as literals.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_triples(fh, literal_tails=literal_tails)

    entity_labels: list[str] = []
    entity_ids: dict[str, int] = {}
    relation_labels: list[str] = []
    relation_ids: dict[str, int] = {}

    def intern_entity(label: str) -> int:
        eid = entity_ids.get(label)
        if eid is None:
            eid = len(entity_labels)
            entity_ids[label] = eid
            entity_labels.append(label)
        return eid

    def intern_relation(label: str) -> int:
        rid = relation_ids.get(label)
        if rid is None:
            rid = len(relation_labels)
            relation_ids[label] = rid
            relation_labels.append(label)
        return rid

    triples: set[tuple[int, int, int]] = set()
    head_ids: set[int] = set()
    n_lines = 0
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3 or any(not f for f in fields):
            raise StoreError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        n_lines += 1
        h = intern_entity(fields[0])
        r = intern_relation(fields[1])
        t = intern_entity(fields[2])
        head_ids.add(h)
        triples.add((h, r, t))

    literal_ids: set[int] = set()
    if literal_tails:
        literal_ids = {eid for eid in range(len(entity_labels)) if eid not in head_ids}

    store = TripleStore(entity_labels, relation_labels, triples, literal_ids)
    logger.info(
        "loaded %d unique triples from %d data lines (%d entities, %d relations)",
        store.num_triples, n_lines, store.num_entities, store.num_relations,
    )
    return store


def store_from_lines(lines: Iterable[str]) -> TripleStore:
    """Convenience loader for in-memory fixtures."""
    return load_triples(io.StringIO("\n".join(lines) + "\n"))
