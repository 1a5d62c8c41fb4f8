"""Knowledge-graph data model with qualifiers, provenance and JSONL persistence.

Entities are shared records: a triple stores entity ids, so adding a type to an
entity is observed by every triple that references it.
"""
from __future__ import annotations

import copy
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Optional, Union

KG_FORMAT_VERSION = 1


class KGError(ValueError):
    pass


class KGFormatError(KGError):
    """Malformed persisted graph; carries the offending 1-based line number."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class LiteralKind(str, Enum):
    DATE = "date"
    QUANTITY = "quantity"
    STRING = "string-literal"


def normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


_ID_RE = re.compile(r"^(.*?)(\d+)$")


def id_sort_key(ident: str):
    m = _ID_RE.match(ident)
    if m:
        return (m.group(1), int(m.group(2)), ident)
    return (ident, -1, ident)


@dataclass
class Chunk:
    doc_id: str
    chunk_index: int
    text: str

    @property
    def id(self) -> str:
        return f"{self.doc_id}#{self.chunk_index}"


@dataclass
class Entity:
    id: str
    label: str
    aliases: list[str] = field(default_factory=list)
    types: set[str] = field(default_factory=set)
    literal_kind: Optional[LiteralKind] = None
    provenance: set[str] = field(default_factory=set)

    @property
    def is_literal(self) -> bool:
        return self.literal_kind is not None


@dataclass(frozen=True, order=True)
class Qualifier:
    predicate: str
    object: str


@dataclass
class TripleFlags:
    auto_swapped: bool = False
    unrepairable: bool = False


@dataclass
class Triple:
    id: str
    subject: str
    predicate: str
    object: str
    qualifiers: list[Qualifier] = field(default_factory=list)
    provenance: str = ""
    flags: TripleFlags = field(default_factory=TripleFlags)

    def key(self) -> tuple:
        return (self.subject, self.predicate, self.object, tuple(sorted(self.qualifiers)))


class KnowledgeGraph:
    """Mutable typed KG. All mutations go through methods so the label,
    pair and incidence indexes stay consistent."""

    def __init__(self, ontology_hash: Optional[str] = None):
        self.ontology_hash = ontology_hash
        self.entities: dict[str, Entity] = {}
        self.triples: dict[str, Triple] = {}
        self.by_label: dict[str, set[str]] = defaultdict(set)
        self.by_pair: dict[tuple[str, str], set[str]] = defaultdict(set)
        self.incident: dict[str, set[str]] = defaultdict(set)
        self._by_key: dict[tuple, str] = {}
        self._next_entity = 1
        self._next_triple = 1

    def __len__(self) -> int:
        return len(self.triples)

    # -- entities ---------------------------------------------------------

    def new_entity_id(self) -> str:
        eid = f"e{self._next_entity:06d}"
        self._next_entity += 1
        return eid

    def add_entity(self, label: str, types: Iterable[str] = (), *, aliases: Iterable[str] = (),
                   literal_kind: Optional[LiteralKind] = None, provenance: Iterable[str] = (),
                   entity_id: Optional[str] = None) -> Entity:
        if not label or not label.strip():
            raise KGError("entity label must be nonempty")
        eid = entity_id or self.new_entity_id()
        if eid in self.entities:
            raise KGError(f"duplicate entity id {eid!r}")
        m = _ID_RE.match(eid)
        if m and m.group(1) == "e":
            self._next_entity = max(self._next_entity, int(m.group(2)) + 1)
        ent = Entity(id=eid, label=label, aliases=list(aliases), types=set(types),
                     literal_kind=literal_kind, provenance=set(provenance))
        self.entities[eid] = ent
        self.by_label[normalize_label(label)].add(eid)
        return ent

    def find_by_label(self, label: str) -> list[Entity]:
        return [self.entities[e] for e in sorted(self.by_label.get(normalize_label(label), ()), key=id_sort_key)]

    def entity(self, eid: str) -> Entity:
        try:
            return self.entities[eid]
        except KeyError:
            raise KGError(f"unknown entity id {eid!r}") from None

    def add_entity_type(self, eid: str, t: str, ontology=None) -> bool:
        """Add type `t` to entity `eid`. Returns False if it was already present."""
        ent = self.entity(eid)
        if ontology is not None and t not in ontology.types:
            raise KGError(f"unknown type id {t!r}")
        if t in ent.types:
            return False
        ent.types.add(t)
        return True

    def relabel_entity(self, eid: str, label: str) -> None:
        ent = self.entity(eid)
        self.by_label[normalize_label(ent.label)].discard(eid)
        if not self.by_label[normalize_label(ent.label)]:
            del self.by_label[normalize_label(ent.label)]
        ent.label = label
        self.by_label[normalize_label(label)].add(eid)

    def remove_entity(self, eid: str) -> None:
        if self.incident.get(eid):
            raise KGError(f"entity {eid!r} still referenced by triples")
        ent = self.entities.pop(eid)
        key = normalize_label(ent.label)
        self.by_label[key].discard(eid)
        if not self.by_label[key]:
            del self.by_label[key]
        self.incident.pop(eid, None)

    # -- triples ----------------------------------------------------------

    def new_triple_id(self) -> str:
        tid = f"t{self._next_triple:06d}"
        self._next_triple += 1
        return tid

    def _check_triple_refs(self, subject: str, obj: str, qualifiers: Iterable[Qualifier]) -> None:
        if subject not in self.entities:
            raise KGError(f"unknown subject entity {subject!r}")
        if obj not in self.entities:
            raise KGError(f"unknown object entity {obj!r}")
        if self.entities[subject].is_literal:
            raise KGError(f"literal entity {subject!r} cannot be a triple subject")
        for q in qualifiers:
            if q.object not in self.entities:
                raise KGError(f"unknown qualifier object {q.object!r}")

    def _index(self, t: Triple) -> None:
        self.by_pair[(t.subject, t.object)].add(t.id)
        for eid in {t.subject, t.object, *(q.object for q in t.qualifiers)}:
            self.incident[eid].add(t.id)
        self._by_key[t.key()] = t.id

    def _unindex(self, t: Triple) -> None:
        pair = (t.subject, t.object)
        self.by_pair[pair].discard(t.id)
        if not self.by_pair[pair]:
            del self.by_pair[pair]
        for eid in {t.subject, t.object, *(q.object for q in t.qualifiers)}:
            self.incident[eid].discard(t.id)
            if not self.incident[eid]:
                del self.incident[eid]
        if self._by_key.get(t.key()) == t.id:
            del self._by_key[t.key()]

    def add_triple(self, subject: str, predicate: str, obj: str, qualifiers: Iterable[Qualifier] = (),
                   provenance: str = "", *, triple_id: Optional[str] = None,
                   flags: Optional[TripleFlags] = None) -> str:
        """Insert a triple, returning its id. An exact duplicate (same s, p, o
        and qualifier multiset) is coalesced into the existing triple."""
        qualifiers = list(qualifiers)
        self._check_triple_refs(subject, obj, qualifiers)
        t = Triple(id=triple_id or "", subject=subject, predicate=predicate, object=obj,
                   qualifiers=qualifiers, provenance=provenance, flags=flags or TripleFlags())
        existing = self._by_key.get(t.key())
        if existing is not None:
            return existing
        if not t.id:
            t.id = self.new_triple_id()
        elif t.id in self.triples:
            raise KGError(f"duplicate triple id {t.id!r}")
        m = _ID_RE.match(t.id)
        if m and m.group(1) == "t":
            self._next_triple = max(self._next_triple, int(m.group(2)) + 1)
        self.triples[t.id] = t
        self._index(t)
        return t.id

    def remove_triple(self, tid: str) -> Triple:
        t = self.triples.pop(tid)
        self._unindex(t)
        return t

    def update_triple(self, tid: str, *, subject: Optional[str] = None, predicate: Optional[str] = None,
                      obj: Optional[str] = None, qualifiers: Optional[list[Qualifier]] = None) -> str:
        """Rewrite fields of a triple in place. If the result duplicates another
        triple, this one is dropped and the surviving id is returned."""
        t = self.triples[tid]
        new_s = t.subject if subject is None else subject
        new_o = t.object if obj is None else obj
        new_q = list(t.qualifiers) if qualifiers is None else list(qualifiers)
        self._check_triple_refs(new_s, new_o, new_q)
        self._unindex(t)
        t.subject, t.object, t.qualifiers = new_s, new_o, new_q
        if predicate is not None:
            t.predicate = predicate
        other = self._by_key.get(t.key())
        if other is not None and other != tid:
            del self.triples[tid]
            return other
        self._index(t)
        return tid

    def triple_ids(self) -> list[str]:
        return sorted(self.triples, key=id_sort_key)

    def entity_ids(self) -> list[str]:
        return sorted(self.entities, key=id_sort_key)

    def qualifier_count(self) -> int:
        return sum(len(t.qualifiers) for t in self.triples.values())

    # -- bulk operations --------------------------------------------------

    def merge_entities(self, keep: str, others: Iterable[str], label: Optional[str] = None) -> None:
        """Fold `others` into `keep`: union types, aliases and provenance,
        re-point triples and qualifier objects, coalesce resulting duplicates."""
        target = self.entity(keep)
        for oid in others:
            if oid == keep:
                continue
            other = self.entity(oid)
            target.types |= other.types
            target.provenance |= other.provenance
            for a in [other.label, *other.aliases]:
                if a not in target.aliases and a != target.label:
                    target.aliases.append(a)
            if target.literal_kind is None:
                target.literal_kind = other.literal_kind
            for tid in sorted(self.incident.get(oid, ()), key=id_sort_key):
                if tid not in self.triples:
                    continue
                t = self.triples[tid]
                self.update_triple(
                    tid,
                    subject=keep if t.subject == oid else None,
                    obj=keep if t.object == oid else None,
                    qualifiers=[Qualifier(q.predicate, keep if q.object == oid else q.object) for q in t.qualifiers],
                )
            self.remove_entity(oid)
        if label is not None and label != target.label:
            if target.label not in target.aliases:
                target.aliases.append(target.label)
            if label in target.aliases:
                target.aliases.remove(label)
            self.relabel_entity(keep, label)

    def rebuild_indexes(self) -> tuple[dict, dict, dict]:
        by_label: dict[str, set[str]] = defaultdict(set)
        by_pair: dict[tuple[str, str], set[str]] = defaultdict(set)
        incident: dict[str, set[str]] = defaultdict(set)
        for e in self.entities.values():
            by_label[normalize_label(e.label)].add(e.id)
        for t in self.triples.values():
            by_pair[(t.subject, t.object)].add(t.id)
            for eid in {t.subject, t.object, *(q.object for q in t.qualifiers)}:
                incident[eid].add(t.id)
        return dict(by_label), dict(by_pair), dict(incident)

    def indexes(self) -> tuple[dict, dict, dict]:
        strip = lambda d: {k: set(v) for k, v in d.items() if v}
        return strip(self.by_label), strip(self.by_pair), strip(self.incident)

    def copy(self) -> "KnowledgeGraph":
        return copy.deepcopy(self)

    def structure(self) -> tuple:
        """Comparable snapshot of the graph content (ids included)."""
        ents = tuple(
            (e.id, e.label, tuple(e.aliases), tuple(sorted(e.types)),
             e.literal_kind.value if e.literal_kind else None, tuple(sorted(e.provenance)))
            for e in (self.entities[i] for i in self.entity_ids())
        )
        trips = tuple(
            (t.id, t.subject, t.predicate, t.object, tuple(t.qualifiers), t.provenance,
             t.flags.auto_swapped, t.flags.unrepairable)
            for t in (self.triples[i] for i in self.triple_ids())
        )
        return (self.ontology_hash, ents, trips)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.structure() == other.structure()

    __hash__ = None  # mutable


# -- merge ----------------------------------------------------------------

def merge_graphs(graphs: list[KnowledgeGraph]) -> KnowledgeGraph:
    """Union graphs, unifying entities by normalized label.

    Entity ids are reassigned in first-seen order, so the output is
    deterministic for a given input order.
    """
    hashes = {g.ontology_hash for g in graphs}
    if len(hashes) > 1:
        raise KGError(f"cannot merge graphs canonicalized against different ontologies: {sorted(map(str, hashes))}")
    out = KnowledgeGraph(ontology_hash=next(iter(hashes)) if hashes else None)
    for g in graphs:
        remap: dict[str, str] = {}
        for eid in g.entity_ids():
            e = g.entities[eid]
            found = out.find_by_label(e.label)
            if found:
                tgt = found[0]
                tgt.types |= e.types
                tgt.provenance |= e.provenance
                for a in e.aliases:
                    if a not in tgt.aliases and a != tgt.label:
                        tgt.aliases.append(a)
                if tgt.literal_kind is None:
                    tgt.literal_kind = e.literal_kind
                remap[eid] = tgt.id
            else:
                remap[eid] = out.add_entity(e.label, e.types, aliases=e.aliases, literal_kind=e.literal_kind,
                                            provenance=e.provenance).id
        for tid in g.triple_ids():
            t = g.triples[tid]
            out.add_triple(remap[t.subject], t.predicate, remap[t.object],
                           [Qualifier(q.predicate, remap[q.object]) for q in t.qualifiers],
                           t.provenance, flags=TripleFlags(t.flags.auto_swapped, t.flags.unrepairable))
    return out


# -- persistence ----------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def entity_record(e: Entity) -> dict:
    return {
        "kind": "entity",
        "id": e.id,
        "label": e.label,
        "aliases": list(e.aliases),
        "types": sorted(e.types),
        "literal_kind": e.literal_kind.value if e.literal_kind else None,
        "provenance": sorted(e.provenance),
    }


def triple_record(t: Triple) -> dict:
    return {
        "kind": "triple",
        "id": t.id,
        "subject": t.subject,
        "predicate": t.predicate,
        "object": t.object,
        "qualifiers": [{"predicate": q.predicate, "object": q.object} for q in t.qualifiers],
        "provenance": t.provenance,
        "flags": {"auto_swapped": t.flags.auto_swapped, "unrepairable": t.flags.unrepairable},
    }


def dumps_kg(kg: KnowledgeGraph) -> str:
    lines = [_dumps({"kind": "kg", "version": KG_FORMAT_VERSION, "ontology_hash": kg.ontology_hash})]
    lines += [_dumps(entity_record(kg.entities[e])) for e in kg.entity_ids()]
    lines += [_dumps(triple_record(kg.triples[t])) for t in kg.triple_ids()]
    return "\n".join(lines) + "\n"


def save_kg(kg: KnowledgeGraph, fh: Optional[IO[bytes]] = None) -> bytes:
    data = dumps_kg(kg).encode("utf-8")
    if fh is not None:
        fh.write(data)
    return data


def _require(rec: dict, key: str, typ, line: int):
    if key not in rec:
        raise KGFormatError(line, f"missing field {key!r}")
    value = rec[key]
    if not isinstance(value, typ):
        raise KGFormatError(line, f"field {key!r} has wrong type")
    return value


def load_kg(data: Union[bytes, str, IO]) -> KnowledgeGraph:
    if hasattr(data, "read"):
        data = data.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = data.splitlines()
    if not lines:
        raise KGFormatError(1, "empty input, expected header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise KGFormatError(1, f"invalid JSON: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("kind") != "kg":
        raise KGFormatError(1, "first record must be the kg header")
    if header.get("version") != KG_FORMAT_VERSION:
        raise KGFormatError(1, f"unsupported version {header.get('version')!r}")
    kg = KnowledgeGraph(ontology_hash=header.get("ontology_hash"))
    pending: list[tuple[int, dict]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise KGFormatError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise KGFormatError(lineno, "record must be an object")
        kind = rec.get("kind")
        if kind == "entity":
            lk = rec.get("literal_kind")
            try:
                literal_kind = LiteralKind(lk) if lk is not None else None
            except ValueError:
                raise KGFormatError(lineno, f"unknown literal_kind {lk!r}") from None
            try:
                kg.add_entity(_require(rec, "label", str, lineno), _require(rec, "types", list, lineno),
                              aliases=_require(rec, "aliases", list, lineno), literal_kind=literal_kind,
                              provenance=_require(rec, "provenance", list, lineno),
                              entity_id=_require(rec, "id", str, lineno))
            except KGError as exc:
                if isinstance(exc, KGFormatError):
                    raise
                raise KGFormatError(lineno, str(exc)) from None
        elif kind == "triple":
            pending.append((lineno, rec))
        else:
            raise KGFormatError(lineno, f"unknown record kind {kind!r}")
    for lineno, rec in pending:
        try:
            quals = [Qualifier(_require(q, "predicate", str, lineno), _require(q, "object", str, lineno))
                     for q in _require(rec, "qualifiers", list, lineno)]
            flags = rec.get("flags") or {}
            tid = _require(rec, "id", str, lineno)
            got = kg.add_triple(_require(rec, "subject", str, lineno), _require(rec, "predicate", str, lineno),
                                _require(rec, "object", str, lineno), quals, rec.get("provenance", ""),
                                triple_id=tid,
                                flags=TripleFlags(bool(flags.get("auto_swapped")), bool(flags.get("unrepairable"))))
        except KGFormatError:
            raise
        except (KGError, TypeError, AttributeError) as exc:
            raise KGFormatError(lineno, str(exc)) from None
        if got != tid:
            raise KGFormatError(lineno, f"triple {tid!r} duplicates {got!r}")
    return kg


def type_multiset(kg: KnowledgeGraph) -> Counter:
    return Counter(t for e in kg.entities.values() for t in e.types)
