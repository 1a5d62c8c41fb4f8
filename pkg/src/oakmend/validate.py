"""Symbolic detection of ontology violations and consistency reporting.

Nothing here talks to a model; results depend only on the ontology and graph.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .kgmodel import KGError, KnowledgeGraph, Qualifier, Triple
from .ontology import Ontology


class ViolationKind(str, Enum):
    DOMAIN = "DomainViolation"
    RANGE = "RangeViolation"
    QUALIFIER_NOT_ALLOWED = "QualifierNotAllowed"
    QUALIFIER_RANGE = "QualifierRangeViolation"


TRIPLE_KINDS = (ViolationKind.DOMAIN, ViolationKind.RANGE)
QUALIFIER_KINDS = (ViolationKind.QUALIFIER_NOT_ALLOWED, ViolationKind.QUALIFIER_RANGE)


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    triple_id: str
    qualifier_index: Optional[int]
    explanation: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "triple_id": self.triple_id, "qualifier_index": self.qualifier_index,
                "explanation": self.explanation}


def _labels(ontology: Ontology, ids: Iterable[str]) -> str:
    return "{" + ", ".join(sorted(ontology.type_label(t) for t in ids)) + "}"


def _entity_types(kg: KnowledgeGraph, eid: str) -> set[str]:
    try:
        return kg.entities[eid].types
    except KeyError:
        raise KGError(f"dangling entity reference {eid!r}") from None


def validate_triple(ontology: Ontology, kg: KnowledgeGraph, triple: Triple) -> list[Violation]:
    spec = ontology.predicate(triple.predicate)
    out = []
    s_types = _entity_types(kg, triple.subject)
    o_types = _entity_types(kg, triple.object)
    if not ontology.types_satisfy(s_types, spec.domain):
        out.append(Violation(ViolationKind.DOMAIN, triple.id, None,
                             f"subject types {_labels(ontology, s_types)} do not satisfy domain "
                             f"{_labels(ontology, spec.domain)} of predicate {spec.label}"))
    if not ontology.types_satisfy(o_types, spec.range):
        out.append(Violation(ViolationKind.RANGE, triple.id, None,
                             f"object types {_labels(ontology, o_types)} do not satisfy range "
                             f"{_labels(ontology, spec.range)} of predicate {spec.label}"))
    return out


def validate_qualifier(ontology: Ontology, kg: KnowledgeGraph, triple: Triple, qualifier: Qualifier,
                       index: Optional[int] = None) -> list[Violation]:
    """Both checks always run, so a disallowed qualifier predicate whose object
    is also out of range reports two violations."""
    if index is None:
        index = triple.qualifiers.index(qualifier)
    spec = ontology.predicate(triple.predicate)
    qspec = ontology.predicate(qualifier.predicate)
    out = []
    if not ontology.qualifier_allowed(triple.predicate, qualifier.predicate):
        out.append(Violation(ViolationKind.QUALIFIER_NOT_ALLOWED, triple.id, index,
                             f"qualifier predicate {qspec.label} is not allowed by predicate {spec.label}"))
    q_types = _entity_types(kg, qualifier.object)
    if not ontology.types_satisfy(q_types, qspec.range):
        out.append(Violation(ViolationKind.QUALIFIER_RANGE, triple.id, index,
                             f"qualifier object types {_labels(ontology, q_types)} do not satisfy range "
                             f"{_labels(ontology, qspec.range)} of qualifier predicate {qspec.label}"))
    return out


def triple_is_valid(ontology: Ontology, kg: KnowledgeGraph, triple: Triple) -> bool:
    spec = ontology.predicate(triple.predicate)
    return (ontology.types_satisfy(kg.entities[triple.subject].types, spec.domain)
            and ontology.types_satisfy(kg.entities[triple.object].types, spec.range))


def _pct(valid: int, total: int) -> Optional[float]:
    return None if total == 0 else 100.0 * valid / total


@dataclass
class ConsistencyReport:
    total_triples: int = 0
    valid_triples: int = 0
    total_qualifiers: int = 0
    valid_qualifiers: int = 0
    violation_counts: dict[str, int] = field(default_factory=lambda: {k.value: 0 for k in ViolationKind})

    @property
    def pct_valid_triples(self) -> Optional[float]:
        return _pct(self.valid_triples, self.total_triples)

    @property
    def pct_valid_qualifiers(self) -> Optional[float]:
        return _pct(self.valid_qualifiers, self.total_qualifiers)

    def to_dict(self) -> dict:
        r = lambda x: None if x is None else round(x, 4)
        return {
            "total_triples": self.total_triples,
            "valid_triples": self.valid_triples,
            "pct_valid_triples": r(self.pct_valid_triples),
            "total_qualifiers": self.total_qualifiers,
            "valid_qualifiers": self.valid_qualifiers,
            "pct_valid_qualifiers": r(self.pct_valid_qualifiers),
            "violations": dict(self.violation_counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        fmt = lambda p: "n/a" if p is None else f"{p:.1f}"
        rows = [("", "total", "valid", "% valid"),
                ("triples", str(self.total_triples), str(self.valid_triples), fmt(self.pct_valid_triples)),
                ("qualifiers", str(self.total_qualifiers), str(self.valid_qualifiers),
                 fmt(self.pct_valid_qualifiers))]
        rows += [(k, str(v), "", "") for k, v in self.violation_counts.items()]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                         .rstrip() for r in rows)


def validate_graph(ontology: Ontology, kg: KnowledgeGraph) -> tuple[ConsistencyReport, list[Violation]]:
    report = ConsistencyReport()
    violations: list[Violation] = []
    for tid in kg.triple_ids():
        t = kg.triples[tid]
        tv = validate_triple(ontology, kg, t)
        report.total_triples += 1
        report.valid_triples += not tv
        violations += tv
        for i, q in enumerate(t.qualifiers):
            qv = validate_qualifier(ontology, kg, t, q, i)
            report.total_qualifiers += 1
            report.valid_qualifiers += not qv
            violations += qv
    for v in violations:
        report.violation_counts[v.kind.value] += 1
    return report, violations
