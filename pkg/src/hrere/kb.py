"""Knowledge-base data model: entities, relations, fact triples.

Triples live in a tab-separated text format (``head\trelation\ttail``, one
per line, ``#`` comments ignored). Every KnowledgeBase carries a reserved
catch-all relation named ``NA`` with the largest relation id; it never
appears in stored triples and exists so that relation distributions can
assign probability to "no relation holds".

Besides loading/saving, this module provides degree-based entity
filtering, unordered-pair removal (test-set leakage protection), and a
latent-cluster synthetic KB generator used by the benchmark pipeline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

NA_NAME = "NA"


@dataclass(frozen=True)
class Entity:
    id: int
    symbol: str


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    is_na: bool = False


@dataclass(frozen=True)
class Triple:
    head: int
    rel: int
    tail: int

    def key(self):
        return (self.head, self.rel, self.tail)


def _check_symbol(text, what):
    if not text or any(ch.isspace() for ch in text) or text.startswith("#"):
        raise DataError(
            f"invalid {what} {text!r}: must be non-empty, contain no whitespace "
            "and not start with '#'"
        )


class KnowledgeBase:
    """Immutable set of entities, relations (incl. NA) and triples.

    Ids are dense: entities 0..E-1, relations 0..R where id R is the NA
    relation. Triples reference non-NA relations only, have head != tail,
    and contain no duplicates.
    """

    def __init__(self, entities, relations, triples):
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        self.triples = tuple(triples)
        self._validate()
        self.triple_set = frozenset(t.key() for t in self.triples)
        self._entity_by_symbol = {e.symbol: e.id for e in self.entities}
        self._relation_by_name = {r.name: r.id for r in self.relations}
        pair_rels: dict[tuple[int, int], list[int]] = {}
        for t in self.triples:
            pair_rels.setdefault((t.head, t.tail), []).append(t.rel)
        self._pair_rels = {p: tuple(sorted(rs)) for p, rs in pair_rels.items()}

    def _validate(self):
        for i, e in enumerate(self.entities):
            if e.id != i:
                raise DataError(f"entity ids not dense at position {i}")
            _check_symbol(e.symbol, "entity symbol")
        if len({e.symbol for e in self.entities}) != len(self.entities):
            raise DataError("duplicate entity symbols")
        na_ids = [r.id for r in self.relations if r.is_na]
        for i, r in enumerate(self.relations):
            if r.id != i:
                raise DataError(f"relation ids not dense at position {i}")
            _check_symbol(r.name, "relation name")
            if r.is_na != (r.name == NA_NAME):
                raise DataError(f"relation {r.name!r}: the NA flag is tied to the name {NA_NAME!r}")
        if len(na_ids) != 1:
            raise DataError(f"expected exactly one NA relation, found {len(na_ids)}")
        if len({r.name for r in self.relations}) != len(self.relations):
            raise DataError("duplicate relation names")
        self._na_id = na_ids[0]
        seen = set()
        for t in self.triples:
            if not (0 <= t.head < len(self.entities)) or not (0 <= t.tail < len(self.entities)):
                raise DataError(f"triple {t} references an unknown entity")
            if not (0 <= t.rel < len(self.relations)) or t.rel == self._na_id:
                raise DataError(f"triple {t} must use a non-NA relation")
            if t.head == t.tail:
                raise DataError(f"self-loop triple {t}")
            if t.key() in seen:
                raise DataError(f"duplicate triple {t}")
            seen.add(t.key())

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def num_relations(self):
        """Count of non-NA relations."""
        return len(self.relations) - 1

    @property
    def na_id(self):
        return self._na_id

    def entity_id(self, symbol):
        try:
            return self._entity_by_symbol[symbol]
        except KeyError:
            raise DataError(f"unknown entity symbol {symbol!r}") from None

    def relation_id(self, name):
        try:
            return self._relation_by_name[name]
        except KeyError:
            raise DataError(f"unknown relation name {name!r}") from None

    def relations_between(self, head, tail):
        """Sorted non-NA relation ids holding between an ordered entity pair."""
        return self._pair_rels.get((head, tail), ())

    def __eq__(self, other):
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and self.triple_set == other.triple_set
        )

    def __repr__(self):
        return (
            f"KnowledgeBase(|E|={self.num_entities}, |R|={self.num_relations}+NA, "
            f"|T|={len(self.triples)})"
        )


def load_kb(path):
    """Parse a triples file into a KnowledgeBase.

    Entities and relations are interned in first-seen order; the NA
    relation is appended last. Malformed lines, duplicate triples and
    self-loops are rejected with the offending line number.
    """
    entities: list[Entity] = []
    relations: list[Relation] = []
    triples: list[Triple] = []
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    seen = set()

    def intern_entity(symbol):
        if symbol not in ent_ids:
            ent_ids[symbol] = len(entities)
            entities.append(Entity(len(entities), symbol))
        return ent_ids[symbol]

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            h, r, t = fields
            for v, what in ((h, "entity symbol"), (r, "relation name"), (t, "entity symbol")):
                try:
                    _check_symbol(v, what)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
            if r == NA_NAME:
                raise DataError(f"{path}:{lineno}: relation name {NA_NAME!r} is reserved")
            if h == t:
                raise DataError(f"{path}:{lineno}: self-loop triple on {h!r}")
            if r not in rel_ids:
                rel_ids[r] = len(relations)
                relations.append(Relation(len(relations), r))
            trip = Triple(intern_entity(h), rel_ids[r], intern_entity(t))
            if trip.key() in seen:
                raise DataError(f"{path}:{lineno}: duplicate triple {h} {r} {t}")
            seen.add(trip.key())
            triples.append(trip)
    relations.append(Relation(len(relations), NA_NAME, is_na=True))
    return KnowledgeBase(entities, relations, triples)


def save_kb(kb, path):
    """Write the KB's triples as tab-separated lines.

    Lines are ordered by (head symbol, relation name, tail symbol) so the
    byte output does not depend on internal id assignment; save -> load ->
    save is byte-identical.
    """
    rows = sorted(
        (kb.entities[t.head].symbol, kb.relations[t.rel].name, kb.entities[t.tail].symbol)
        for t in kb.triples
    )
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in rows:
            fh.write(f"{h}\t{r}\t{t}\n")


def degree_filter(kb, k):
    """Keep the k entities with the most triple participations.

    Ties break toward the smaller entity id. Triples touching a removed
    entity are dropped and surviving entity ids are re-indexed densely in
    their original order. k larger than the entity count is a no-op.
    """
    if k < 1:
        raise DataError(f"degree_filter needs k >= 1, got {k}")
    if k >= kb.num_entities:
        return kb
    deg = [0] * kb.num_entities
    for t in kb.triples:
        deg[t.head] += 1
        deg[t.tail] += 1
    order = sorted(range(kb.num_entities), key=lambda i: (-deg[i], i))
    keep = sorted(order[:k])
    remap = {old: new for new, old in enumerate(keep)}
    entities = [Entity(remap[old], kb.entities[old].symbol) for old in keep]
    triples = [
        Triple(remap[t.head], t.rel, remap[t.tail])
        for t in kb.triples
        if t.head in remap and t.tail in remap
    ]
    log.info("degree_filter: kept %d/%d entities, %d/%d triples",
             k, kb.num_entities, len(triples), len(kb.triples))
    return KnowledgeBase(entities, kb.relations, triples)


def adopt_triples(inventory, donor):
    """Donor's triples re-expressed over the inventory KB's id space.

    A triples file only records symbols, so loading a reduced copy (say,
    with test pairs removed) re-interns ids and can drop entities that
    lost all their triples. Mapping the donor's triples back onto the
    inventory keeps ids, entity counts, and the NA row aligned with the
    original KB. Symbols unknown to the inventory are rejected.
    """
    triples = []
    for t in donor.triples:
        triples.append(
            Triple(
                inventory.entity_id(donor.entities[t.head].symbol),
                inventory.relation_id(donor.relations[t.rel].name),
                inventory.entity_id(donor.entities[t.tail].symbol),
            )
        )
    return KnowledgeBase(inventory.entities, inventory.relations, triples)


def remove_test_pairs(kb, pairs):
    """Drop every triple whose entity pair occurs in `pairs`, in either order.

    Entities and relations are untouched. Unknown pairs are ignored and the
    operation is idempotent.
    """
    banned = {frozenset(p) for p in pairs}
    triples = [t for t in kb.triples if frozenset((t.head, t.tail)) not in banned]
    return KnowledgeBase(kb.entities, kb.relations, triples)


def _relation_pairs(n_groups, n_relations, rng):
    # distinct ordered group pairs while they last, then wrap with repeats
    all_pairs = [(a, b) for a in range(n_groups) for b in range(n_groups)]
    order = rng.permutation(len(all_pairs))
    pairs = []
    while len(pairs) < n_relations:
        take = min(n_relations - len(pairs), len(all_pairs))
        pairs.extend(all_pairs[i] for i in order[:take])
    return pairs[:n_relations]


def generate_synthetic_kb(n_entities, n_relations, n_triples, seed):
    """Sample a random KB with latent cluster structure.

    Entities are split round-robin (after a seeded shuffle) into a handful
    of groups; each relation links one source group to one target group and
    its triples are drawn without replacement from that block. The block
    structure is what a KB embedding can generalize from. Triple order is
    a final seeded shuffle, so prefix/suffix splits are relation-balanced.
    """
    if n_entities < 2 or n_relations < 1 or n_triples < 0:
        raise DataError(
            f"infeasible counts: n_entities={n_entities}, n_relations={n_relations}, "
            f"n_triples={n_triples}"
        )
    if n_triples > n_entities * (n_entities - 1) * n_relations:
        raise DataError(f"infeasible counts: cannot place {n_triples} distinct triples")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_entities)

    g0 = max(2, min(8, math.isqrt(n_entities)))
    for g in range(g0, 1, -1):
        members = [sorted(int(perm[i]) for i in range(n_entities) if i % g == j) for j in range(g)]
        pairs = _relation_pairs(g, n_relations, rng)
        caps = [
            len(members[a]) * len(members[b]) - (len(members[a]) if a == b else 0)
            for a, b in pairs
        ]
        if sum(caps) >= n_triples:
            break
    else:
        raise DataError(
            f"infeasible counts: {n_triples} triples do not fit the cluster structure "
            f"of {n_entities} entities / {n_relations} relations"
        )

    quota = [n_triples // n_relations] * n_relations
    for i in range(n_triples % n_relations):
        quota[i] += 1
    while True:
        over = sum(max(0, q - c) for q, c in zip(quota, caps))
        if over == 0:
            break
        quota = [min(q, c) for q, c in zip(quota, caps)]
        i = 0
        while over > 0:
            if quota[i] < caps[i]:
                quota[i] += 1
                over -= 1
            i = (i + 1) % n_relations

    ew = len(str(n_entities - 1))
    rw = len(str(n_relations - 1))
    entities = [Entity(i, f"e{i:0{ew}d}") for i in range(n_entities)]
    relations = [Relation(i, f"r{i:0{rw}d}") for i in range(n_relations)]
    relations.append(Relation(n_relations, NA_NAME, is_na=True))

    triples = []
    for r, ((a, b), q) in enumerate(zip(pairs, quota)):
        cand = [(h, t) for h in members[a] for t in members[b] if h != t]
        pick = rng.permutation(len(cand))[:q]
        triples.extend(Triple(cand[i][0], r, cand[i][1]) for i in pick)
    order = rng.permutation(len(triples))
    triples = [triples[i] for i in order]
    log.info("generate_synthetic_kb: %d groups, %d triples", g, len(triples))
    return KnowledgeBase(entities, relations, triples)
