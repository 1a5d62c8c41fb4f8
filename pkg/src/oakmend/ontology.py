"""Ontology data model: type hierarchy, predicate constraints, constraint checks.

An ontology is loaded once from a JSON document and is read-only afterwards.
The subclass relation is taken reflexive-transitive, so an entity typed
exactly as a constraint member satisfies that constraint.
"""
from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class OntologyError(ValueError):
    """Raised for malformed ontology documents and unknown identifiers."""


@dataclass(frozen=True)
class TypeNode:
    id: str
    label: str
    aliases: tuple[str, ...] = ()
    parents: frozenset[str] = frozenset()


@dataclass(frozen=True)
class PredicateSpec:
    id: str
    label: str
    aliases: tuple[str, ...] = ()
    domain: Optional[frozenset[str]] = None
    range: Optional[frozenset[str]] = None
    allowed_qualifiers: Optional[frozenset[str]] = None
    is_qualifier: bool = False

    @property
    def names(self) -> tuple[str, ...]:
        return (self.label, *self.aliases)


@dataclass
class Ontology:
    types: dict[str, TypeNode] = field(default_factory=dict)
    predicates: dict[str, PredicateSpec] = field(default_factory=dict)
    ancestor_closure: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ancestor_closure and self.types:
            self.ancestor_closure = _compute_closure(self.types)
        descendants: dict[str, set[str]] = {t: set() for t in self.types}
        for t, ancestors in self.ancestor_closure.items():
            for a in ancestors:
                descendants[a].add(t)
        self.descendant_closure = {t: frozenset(d) for t, d in descendants.items()}
        self._type_by_name: dict[str, str] = {}
        for tid in sorted(self.types):
            node = self.types[tid]
            for name in (tid, node.label, *node.aliases):
                self._type_by_name.setdefault(name.casefold(), tid)
        self._pred_by_name: dict[str, str] = {}
        for pid in sorted(self.predicates):
            spec = self.predicates[pid]
            for name in (pid, spec.label, *spec.aliases):
                self._pred_by_name.setdefault(name.casefold(), pid)

    # -- lookups -----------------------------------------------------------

    def type(self, t: str) -> TypeNode:
        try:
            return self.types[t]
        except KeyError:
            raise OntologyError(f"unknown type id {t!r}") from None

    def predicate(self, r: str) -> PredicateSpec:
        try:
            return self.predicates[r]
        except KeyError:
            raise OntologyError(f"unknown predicate id {r!r}") from None

    def type_label(self, t: str) -> str:
        node = self.types.get(t)
        return node.label if node else t

    def predicate_label(self, r: str) -> str:
        spec = self.predicates.get(r)
        return spec.label if spec else r

    def resolve_type(self, name: str) -> Optional[str]:
        """Map an id, label or alias (case-insensitive) to a type id."""
        return self._type_by_name.get(name.strip().casefold())

    def resolve_predicate(self, name: str) -> Optional[str]:
        return self._pred_by_name.get(name.strip().casefold())

    def main_predicates(self) -> list[PredicateSpec]:
        return [self.predicates[p] for p in sorted(self.predicates) if not self.predicates[p].is_qualifier]

    def qualifier_predicates(self) -> list[PredicateSpec]:
        return [self.predicates[p] for p in sorted(self.predicates) if self.predicates[p].is_qualifier]

    # -- constraint semantics ---------------------------------------------

    def ancestors(self, t: str) -> frozenset[str]:
        try:
            return self.ancestor_closure[t]
        except KeyError:
            raise OntologyError(f"unknown type id {t!r}") from None

    def descendants(self, t: str) -> frozenset[str]:
        try:
            return self.descendant_closure[t]
        except KeyError:
            raise OntologyError(f"unknown type id {t!r}") from None

    def is_subtype(self, t: str, u: str) -> bool:
        if u not in self.types:
            raise OntologyError(f"unknown type id {u!r}")
        return u in self.ancestors(t)

    def types_satisfy(self, types: Iterable[str], constraint: Optional[Iterable[str]]) -> bool:
        """True when some type in `types` is a (reflexive) subtype of some
        member of `constraint`. An absent constraint is always satisfied."""
        types = list(types)
        for t in types:
            if t not in self.types:
                raise OntologyError(f"unknown type id {t!r}")
        if constraint is None:
            return True
        constraint = frozenset(constraint)
        for u in constraint:
            if u not in self.types:
                raise OntologyError(f"unknown type id {u!r}")
        return any(not self.ancestor_closure[t].isdisjoint(constraint) for t in types)

    def qualifier_allowed(self, r: str, r_q: str) -> bool:
        spec = self.predicate(r)
        qspec = self.predicate(r_q)
        if not qspec.is_qualifier:
            raise OntologyError(f"predicate {r_q!r} is not a qualifier predicate")
        if spec.allowed_qualifiers is None:
            return True
        return r_q in spec.allowed_qualifiers

    # -- serialization ----------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        types = []
        for tid in sorted(self.types):
            node = self.types[tid]
            types.append({"id": node.id, "label": node.label, "aliases": list(node.aliases),
                          "parents": sorted(node.parents)})
        preds = []
        for pid in sorted(self.predicates):
            spec = self.predicates[pid]
            rec: dict[str, Any] = {"id": spec.id, "label": spec.label, "aliases": list(spec.aliases),
                                   "is_qualifier": spec.is_qualifier}
            for key in ("domain", "range", "allowed_qualifiers"):
                value = getattr(spec, key)
                if value is not None:
                    rec[key] = sorted(value)
            preds.append(rec)
        return {"types": types, "predicates": preds}

    @property
    def content_hash(self) -> str:
        blob = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _compute_closure(types: dict[str, TypeNode]) -> dict[str, frozenset[str]]:
    """Reflexive-transitive ancestor sets; raises on cycles."""
    closure: dict[str, frozenset[str]] = {}
    WHITE, GREY = 0, 1
    state: dict[str, int] = {}

    for root in sorted(types):
        if root in closure:
            continue
        # iterative DFS so deep hierarchies do not hit the recursion limit
        stack: list[tuple[str, Iterable[str]]] = [(root, iter(sorted(types[root].parents)))]
        path = [root]
        state[root] = GREY
        while stack:
            node, children = stack[-1]
            nxt = next(children, None)
            if nxt is None:
                stack.pop()
                path.pop()
                acc = {node}
                for p in types[node].parents:
                    acc |= closure[p]
                closure[node] = frozenset(acc)
                continue
            if nxt in closure:
                continue
            if state.get(nxt, WHITE) == GREY:
                cycle = path[path.index(nxt):] + [nxt]
                raise OntologyError("cycle in type hierarchy: " + " -> ".join(cycle))
            state[nxt] = GREY
            path.append(nxt)
            stack.append((nxt, iter(sorted(types[nxt].parents))))
    return closure


def _opt_set(rec: dict, key: str, where: str) -> Optional[frozenset[str]]:
    if key not in rec or rec[key] is None:
        return None
    value = rec[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise OntologyError(f"{where}: {key!r} must be a list of ids")
    if not value:
        raise OntologyError(f"{where}: {key!r} is an explicitly empty set; omit the key for no constraint")
    return frozenset(value)


def load_ontology(document: dict[str, Any]) -> Ontology:
    """Validate an ontology document and precompute the subclass closure.

    Absent ``domain``/``range``/``allowed_qualifiers`` keys mean unconstrained.
    Cycles, dangling references, duplicate ids and explicitly empty constraint
    lists reject the whole document.
    """
    if not isinstance(document, dict):
        raise OntologyError("ontology document must be a JSON object")
    types: dict[str, TypeNode] = {}
    for i, rec in enumerate(document.get("types", [])):
        where = f"types[{i}]"
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
            raise OntologyError(f"{where}: missing string 'id'")
        tid = rec["id"]
        if tid in types:
            raise OntologyError(f"{where}: duplicate type id {tid!r}")
        types[tid] = TypeNode(
            id=tid,
            label=rec.get("label") or tid,
            aliases=tuple(rec.get("aliases") or ()),
            parents=frozenset(rec.get("parents") or ()),
        )
    for tid, node in types.items():
        for p in sorted(node.parents):
            if p not in types:
                raise OntologyError(f"type {tid!r}: parent {p!r} does not resolve")

    preds: dict[str, PredicateSpec] = {}
    for i, rec in enumerate(document.get("predicates", [])):
        where = f"predicates[{i}]"
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
            raise OntologyError(f"{where}: missing string 'id'")
        pid = rec["id"]
        if pid in preds:
            raise OntologyError(f"{where}: duplicate predicate id {pid!r}")
        where = f"predicate {pid!r}"
        preds[pid] = PredicateSpec(
            id=pid,
            label=rec.get("label") or pid,
            aliases=tuple(rec.get("aliases") or ()),
            domain=_opt_set(rec, "domain", where),
            range=_opt_set(rec, "range", where),
            allowed_qualifiers=_opt_set(rec, "allowed_qualifiers", where),
            is_qualifier=bool(rec.get("is_qualifier", False)),
        )
    for pid, spec in preds.items():
        for key in ("domain", "range"):
            for t in sorted(getattr(spec, key) or ()):
                if t not in types:
                    raise OntologyError(f"predicate {pid!r}: {key} type {t!r} does not resolve")
        for q in sorted(spec.allowed_qualifiers or ()):
            if q not in preds:
                raise OntologyError(f"predicate {pid!r}: allowed qualifier {q!r} does not resolve")
            if not preds[q].is_qualifier:
                raise OntologyError(f"predicate {pid!r}: allowed qualifier {q!r} is not a qualifier predicate")

    return Ontology(types=types, predicates=preds, ancestor_closure=_compute_closure(types))


def read_ontology(path: str | Path) -> Ontology:
    with open(path, encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise OntologyError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return load_ontology(document)
