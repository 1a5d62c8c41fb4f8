"""Correction of ontology violations.

Triples: an automatic subject/object swap pass, then one chat call per
still-violating triple returning an ordered list of actions. Qualifiers: one
chat call per violating qualifier returning a single action. Type additions
go to the shared entity record, so one call can repair many triples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .extract import parse_json_payload
from .kgmodel import KnowledgeGraph, Qualifier, Triple
from .llmgate import ChatClient, EmbeddingClient, Stage, cosine
from .ontology import Ontology
from .prompts import mend_qualifier_prompt, mend_triple_prompt
from .validate import Violation, validate_qualifier, validate_triple

log = logging.getLogger(__name__)


class PlanRejected(ValueError):
    """A plan breaks an action invariant or would worsen its target."""


@dataclass(frozen=True)
class Swap:
    pass


@dataclass(frozen=True)
class ReplacePredicate:
    predicate: str


@dataclass(frozen=True)
class AddSubjectType:
    type: str


@dataclass(frozen=True)
class AddObjectType:
    type: str


@dataclass(frozen=True)
class ReplaceQualifierPredicate:
    predicate: str


@dataclass(frozen=True)
class AddQualifierObjectType:
    type: str


_ACTION_NAMES = {
    Swap: "swap", ReplacePredicate: "replace_predicate", AddSubjectType: "add_subject_type",
    AddObjectType: "add_object_type", ReplaceQualifierPredicate: "replace_predicate",
    AddQualifierObjectType: "add_object_type",
}

TripleAction = Union[Swap, ReplacePredicate, AddSubjectType, AddObjectType]
QualifierAction = Union[ReplaceQualifierPredicate, AddQualifierObjectType]


class Outcome(str, Enum):
    FIXED = "fixed"
    STILL_INVALID = "still_invalid"
    DECLINED = "declined"


@dataclass
class CorrectionPlan:
    triple_id: str
    actions: list = field(default_factory=list)
    qualifier_index: Optional[int] = None
    candidates: list[str] = field(default_factory=list)
    outcome: Optional[Outcome] = None
    note: str = ""

    def __post_init__(self):
        if not self.actions and self.outcome is None:
            self.outcome = Outcome.DECLINED

    def to_dict(self) -> dict:
        acts = [[_ACTION_NAMES[type(a)], next(iter(vars(a).values()), None)] for a in self.actions]
        return {"triple_id": self.triple_id, "qualifier_index": self.qualifier_index, "actions": acts,
                "outcome": self.outcome.value if self.outcome else None, "note": self.note}


# -- helpers ----------------------------------------------------------------------

def _violation_count(ontology: Ontology, s_types, r: str, o_types) -> int:
    spec = ontology.predicate(r)
    return (not ontology.types_satisfy(s_types, spec.domain)) + (not ontology.types_satisfy(o_types, spec.range))


def _q_violation_count(ontology: Ontology, r: str, r_q: str, q_types) -> int:
    return ((not ontology.qualifier_allowed(r, r_q))
            + (not ontology.types_satisfy(q_types, ontology.predicate(r_q).range)))


def _rank_by_similarity(ontology: Ontology, embed: EmbeddingClient, anchor: str, ids: list[str]) -> list[str]:
    if not ids:
        return []
    a = embed.embed(ontology.predicate_label(anchor))
    vecs = embed.embed_many([ontology.predicate_label(i) for i in ids])
    scored = sorted(((-cosine(a, v), i) for i, v in zip(ids, vecs)))
    return [i for _, i in scored]


def _resolve_among(ontology: Ontology, value, allowed: list[str]) -> Optional[str]:
    if not isinstance(value, str) or not value.strip():
        return None
    v = value.strip().casefold()
    for pid in allowed:
        spec = ontology.predicates[pid]
        if v in (pid.casefold(), spec.label.casefold(), *(a.casefold() for a in spec.aliases)):
            return pid
    return None


# -- automatic swap ----------------------------------------------------------------

def auto_swap_pass(ontology: Ontology, kg: KnowledgeGraph) -> int:
    """Swap every violating triple whose reversed form satisfies both domain
    and range. Literal objects are never moved into subject position."""
    swaps = 0
    for tid in kg.triple_ids():
        t = kg.triples.get(tid)
        if t is None:
            continue
        s_types, o_types = kg.entities[t.subject].types, kg.entities[t.object].types
        if _violation_count(ontology, s_types, t.predicate, o_types) == 0:
            continue
        if kg.entities[t.object].is_literal:
            continue
        if _violation_count(ontology, o_types, t.predicate, s_types) == 0:
            survivor = kg.update_triple(tid, subject=t.object, obj=t.subject)
            kg.triples[survivor].flags.auto_swapped = True
            swaps += 1
    return swaps


# -- triple corrections --------------------------------------------------------

def candidate_predicates(ontology: Ontology, kg: KnowledgeGraph, triple: Triple, k: int,
                         embed: EmbeddingClient) -> list[str]:
    """Main predicates that would make (s, r', o) consistent under current
    types, most similar to the current predicate's label first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s_types, o_types = kg.entities[triple.subject].types, kg.entities[triple.object].types
    ok = [p.id for p in ontology.main_predicates()
          if p.id != triple.predicate
          and ontology.types_satisfy(s_types, p.domain) and ontology.types_satisfy(o_types, p.range)]
    return _rank_by_similarity(ontology, embed, triple.predicate, ok)[:k]


_TRIPLE_ACTIONS = {"swap", "replace_predicate", "add_subject_type", "add_object_type"}


def parse_triple_plan(ontology: Ontology, reply: str, triple_id: str, candidates: list[str]) -> CorrectionPlan:
    """Turn a model reply into a plan. Any unknown action or unresolvable value
    invalidates the whole plan (returned declined with a note)."""
    payload = parse_json_payload(reply)
    if not isinstance(payload, list):
        raise ValueError("plan reply is not a JSON list")
    if payload and isinstance(payload[0], str):
        payload = [payload]
    actions = []
    for item in payload:
        if not (isinstance(item, list) and 1 <= len(item) <= 2 and isinstance(item[0], str)):
            return CorrectionPlan(triple_id, candidates=candidates, note=f"malformed action {item!r}")
        name = item[0].strip().casefold()
        value = item[1] if len(item) == 2 else None
        if name not in _TRIPLE_ACTIONS:
            return CorrectionPlan(triple_id, candidates=candidates, note=f"unknown action {name!r}")
        if name == "swap":
            actions.append(Swap())
        elif name == "replace_predicate":
            pid = _resolve_among(ontology, value, candidates)
            if pid is None:
                return CorrectionPlan(triple_id, candidates=candidates, note=f"predicate {value!r} not a candidate")
            actions.append(ReplacePredicate(pid))
        else:
            tid = ontology.resolve_type(value) if isinstance(value, str) else None
            if tid is None:
                return CorrectionPlan(triple_id, candidates=candidates, note=f"unknown type {value!r}")
            actions.append(AddSubjectType(tid) if name == "add_subject_type" else AddObjectType(tid))
    return CorrectionPlan(triple_id, actions, candidates=candidates)


def plan_triple_correction(ontology: Ontology, kg: KnowledgeGraph, triple: Triple, violations: list[Violation],
                           chunk_text: str, chat: ChatClient, embed: EmbeddingClient, k: int = 10
                           ) -> CorrectionPlan:
    candidates = candidate_predicates(ontology, kg, triple, k, embed)
    spec = ontology.predicate(triple.predicate)
    labels = lambda ids: None if ids is None else sorted(ontology.type_label(t) for t in ids)
    prompt = mend_triple_prompt(
        chunk_text,
        (kg.entities[triple.subject].label, spec.label, kg.entities[triple.object].label),
        labels(spec.domain), labels(spec.range),
        [ontology.predicate_label(c) for c in candidates],
        [v.explanation for v in violations],
    )
    for attempt in range(2):
        reply = chat.chat(Stage.MEND_TRIPLE, prompt)
        try:
            plan = parse_triple_plan(ontology, reply, triple.id, candidates)
        except ValueError:
            log.warning("triple %s: unparseable correction reply (attempt %d)", triple.id, attempt + 1)
            continue
        if plan.note:
            log.warning("triple %s: plan rejected: %s", triple.id, plan.note)
        return plan
    return CorrectionPlan(triple.id, candidates=candidates, note="unparseable reply")


def _stage_triple_plan(ontology: Ontology, kg: KnowledgeGraph, plan: CorrectionPlan):
    t = kg.triples[plan.triple_id]
    s, r, o = t.subject, t.predicate, t.object
    added: dict[str, set[str]] = {}
    types = lambda e: kg.entities[e].types | added.get(e, set())
    for a in plan.actions:
        if isinstance(a, Swap):
            s, o = o, s
            if kg.entities[s].is_literal:
                raise PlanRejected("swap would make a literal the subject")
        elif isinstance(a, ReplacePredicate):
            if a.predicate not in plan.candidates:
                raise PlanRejected(f"predicate {a.predicate!r} was not offered")
            r = a.predicate
        elif isinstance(a, AddSubjectType):
            dom = ontology.predicate(r).domain
            if dom is None or a.type not in dom:
                raise PlanRejected(f"type {a.type!r} not in domain of {r!r}")
            added.setdefault(s, set()).add(a.type)
        elif isinstance(a, AddObjectType):
            rng = ontology.predicate(r).range
            if rng is None or a.type not in rng:
                raise PlanRejected(f"type {a.type!r} not in range of {r!r}")
            added.setdefault(o, set()).add(a.type)
        else:
            raise PlanRejected(f"not a triple action: {a!r}")
    before = _violation_count(ontology, kg.entities[t.subject].types, t.predicate, kg.entities[t.object].types)
    after = _violation_count(ontology, types(s), r, types(o))
    if after > before:
        raise PlanRejected(f"plan would raise violations from {before} to {after}")
    # a new predicate may disallow qualifiers that were fine before
    q_before = sum(_q_violation_count(ontology, t.predicate, q.predicate, kg.entities[q.object].types) > 0
                   for q in t.qualifiers)
    q_after = sum(_q_violation_count(ontology, r, q.predicate, types(q.object)) > 0 for q in t.qualifiers)
    if q_after > q_before:
        raise PlanRejected(f"plan would raise invalid qualifiers from {q_before} to {q_after}")
    return s, r, o, added


def _stage_qualifier_plan(ontology: Ontology, kg: KnowledgeGraph, plan: CorrectionPlan):
    t = kg.triples[plan.triple_id]
    q = t.qualifiers[plan.qualifier_index]
    if len(plan.actions) != 1:
        raise PlanRejected("qualifier plans take exactly one action")
    a = plan.actions[0]
    r_q, q_types = q.predicate, set(kg.entities[q.object].types)
    if isinstance(a, ReplaceQualifierPredicate):
        if a.predicate not in plan.candidates:
            raise PlanRejected(f"qualifier predicate {a.predicate!r} was not offered")
        r_q = a.predicate
    elif isinstance(a, AddQualifierObjectType):
        rng = ontology.predicate(q.predicate).range
        if rng is None or a.type not in rng:
            raise PlanRejected(f"type {a.type!r} not in range of {q.predicate!r}")
        q_types.add(a.type)
    else:
        raise PlanRejected(f"not a qualifier action: {a!r}")
    before = _q_violation_count(ontology, t.predicate, q.predicate, kg.entities[q.object].types)
    after = _q_violation_count(ontology, t.predicate, r_q, q_types)
    if after > before:
        raise PlanRejected(f"plan would raise violations from {before} to {after}")
    return a


def apply_plan(ontology: Ontology, kg: KnowledgeGraph, plan: CorrectionPlan) -> Outcome:
    """Apply a plan atomically and record the re-validated outcome.

    The whole action sequence is checked on a staged copy of the target first;
    an invariant breach raises PlanRejected and leaves the graph untouched.
    """
    if not plan.actions:
        plan.outcome = Outcome.DECLINED
        return plan.outcome
    if plan.triple_id not in kg.triples:
        raise PlanRejected(f"unknown triple {plan.triple_id!r}")
    if plan.qualifier_index is None:
        s, r, o, added = _stage_triple_plan(ontology, kg, plan)
        for eid in sorted(added):
            for t in sorted(added[eid]):
                kg.add_entity_type(eid, t)
        tid = kg.update_triple(plan.triple_id, subject=s, predicate=r, obj=o)
        plan.triple_id = tid
        ok = not validate_triple(ontology, kg, kg.triples[tid])
    else:
        a = _stage_qualifier_plan(ontology, kg, plan)
        t = kg.triples[plan.triple_id]
        idx = plan.qualifier_index
        q = t.qualifiers[idx]
        if isinstance(a, AddQualifierObjectType):
            kg.add_entity_type(q.object, a.type)
            tid = plan.triple_id
        else:
            quals = list(t.qualifiers)
            quals[idx] = Qualifier(a.predicate, q.object)
            tid = kg.update_triple(plan.triple_id, qualifiers=quals)
            plan.triple_id = tid
        t = kg.triples[tid]
        ok = not validate_qualifier(ontology, kg, t, t.qualifiers[idx], idx)
    plan.outcome = Outcome.FIXED if ok else Outcome.STILL_INVALID
    return plan.outcome


# -- qualifier corrections ------------------------------------------------------

def qualifier_candidates(ontology: Ontology, kg: KnowledgeGraph, triple: Triple, qualifier: Qualifier, k: int,
                         embed: EmbeddingClient) -> list[str]:
    spec = ontology.predicate(triple.predicate)
    pool = sorted(spec.allowed_qualifiers) if spec.allowed_qualifiers is not None else \
        [p.id for p in ontology.qualifier_predicates()]
    q_types = kg.entities[qualifier.object].types
    ok = [p for p in pool if p != qualifier.predicate and ontology.types_satisfy(q_types, ontology.predicate(p).range)]
    return _rank_by_similarity(ontology, embed, qualifier.predicate, ok)[:k]


_QUALIFIER_ACTIONS = {"replace_predicate", "add_object_type"}


def parse_qualifier_plan(ontology: Ontology, reply: str, triple_id: str, index: int,
                         candidates: list[str]) -> CorrectionPlan:
    payload = parse_json_payload(reply)
    if not isinstance(payload, list):
        raise ValueError("qualifier reply is not a JSON list")
    if len(payload) == 1 and isinstance(payload[0], list):
        payload = payload[0]
    plan = lambda acts, note="": CorrectionPlan(triple_id, acts, index, candidates, note=note)
    if not payload:
        return plan([])
    if not (len(payload) == 2 and isinstance(payload[0], str)):
        return plan([], f"malformed qualifier action {payload!r}")
    name, value = payload[0].strip().casefold(), payload[1]
    if name not in _QUALIFIER_ACTIONS:
        return plan([], f"unknown action {name!r}")
    if name == "replace_predicate":
        pid = _resolve_among(ontology, value, candidates)
        if pid is None:
            return plan([], f"qualifier predicate {value!r} not a candidate")
        return plan([ReplaceQualifierPredicate(pid)])
    tid = ontology.resolve_type(value) if isinstance(value, str) else None
    if tid is None:
        return plan([], f"unknown type {value!r}")
    return plan([AddQualifierObjectType(tid)])


def plan_qualifier_correction(ontology: Ontology, kg: KnowledgeGraph, triple: Triple, index: int,
                              violations: list[Violation], chunk_text: str, chat: ChatClient,
                              embed: EmbeddingClient, k: int = 10) -> CorrectionPlan:
    q = triple.qualifiers[index]
    candidates = qualifier_candidates(ontology, kg, triple, q, k, embed)
    qspec = ontology.predicate(q.predicate)
    rng = None if qspec.range is None else sorted(ontology.type_label(t) for t in qspec.range)
    prompt = mend_qualifier_prompt(
        chunk_text,
        (kg.entities[triple.subject].label, ontology.predicate_label(triple.predicate),
         kg.entities[triple.object].label),
        (qspec.label, kg.entities[q.object].label), rng,
        [ontology.predicate_label(c) for c in candidates],
        [v.explanation for v in violations],
    )
    for attempt in range(2):
        reply = chat.chat(Stage.MEND_QUALIFIER, prompt)
        try:
            plan = parse_qualifier_plan(ontology, reply, triple.id, index, candidates)
        except ValueError:
            log.warning("qualifier %s[%d]: unparseable reply (attempt %d)", triple.id, index, attempt + 1)
            continue
        if plan.note:
            log.warning("qualifier %s[%d]: plan rejected: %s", triple.id, index, plan.note)
        return plan
    return CorrectionPlan(triple.id, [], index, candidates, note="unparseable reply")


# -- passes ---------------------------------------------------------------------------

@dataclass
class MendCounts:
    auto_swapped: int = 0
    llm_fixed: int = 0
    declined: int = 0
    still_invalid: int = 0
    chat_calls: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class MendReport:
    triples: MendCounts = field(default_factory=MendCounts)
    qualifiers: MendCounts = field(default_factory=MendCounts)
    plans: list[CorrectionPlan] = field(default_factory=list)

    def to_dict(self) -> dict:
        q = self.qualifiers.to_dict()
        q.pop("auto_swapped")
        return {"triples": self.triples.to_dict(), "qualifiers": q, "plans": [p.to_dict() for p in self.plans]}


def _book(counts: MendCounts, plan: CorrectionPlan) -> None:
    if plan.outcome == Outcome.FIXED:
        counts.llm_fixed += 1
    elif plan.outcome == Outcome.STILL_INVALID:
        counts.still_invalid += 1
    else:
        counts.declined += 1


def mend_triples(ontology: Ontology, kg: KnowledgeGraph, chat: ChatClient, embed: EmbeddingClient,
                 chunk_texts: Optional[dict[str, str]] = None, k: int = 10, rounds: int = 1,
                 report: Optional[MendReport] = None) -> MendReport:
    """Auto-swap, then one pass (per round) over violating triples in id order.

    Each triple is re-validated right before its turn, since a type added for
    an earlier triple may already have repaired it; those cost no call.
    """
    report = report or MendReport()
    chunk_texts = chunk_texts or {}
    report.triples.auto_swapped += auto_swap_pass(ontology, kg)
    for rnd in range(max(1, rounds)):
        for tid in kg.triple_ids():
            t = kg.triples.get(tid)
            if t is None or (rnd > 0 and t.flags.unrepairable):
                continue
            violations = validate_triple(ontology, kg, t)
            if not violations:
                continue
            plan = plan_triple_correction(ontology, kg, t, violations, chunk_texts.get(t.provenance, ""),
                                          chat, embed, k)
            report.triples.chat_calls += 1
            try:
                apply_plan(ontology, kg, plan)
            except PlanRejected as exc:
                log.warning("triple %s: %s", tid, exc)
                plan.note = str(exc)
                plan.outcome = Outcome.DECLINED
            if plan.outcome == Outcome.DECLINED:
                kg.triples[tid].flags.unrepairable = True
            report.plans.append(plan)
            _book(report.triples, plan)
    return report


def mend_qualifiers(ontology: Ontology, kg: KnowledgeGraph, chat: ChatClient, embed: EmbeddingClient,
                    chunk_texts: Optional[dict[str, str]] = None, k: int = 10,
                    report: Optional[MendReport] = None) -> MendReport:
    """One call per qualifier that is still violating at its turn."""
    report = report or MendReport()
    chunk_texts = chunk_texts or {}
    for tid in kg.triple_ids():
        i = 0
        while tid in kg.triples and i < len(kg.triples[tid].qualifiers):
            t = kg.triples[tid]
            violations = validate_qualifier(ontology, kg, t, t.qualifiers[i], i)
            if violations:
                plan = plan_qualifier_correction(ontology, kg, t, i, violations, chunk_texts.get(t.provenance, ""),
                                                 chat, embed, k)
                report.qualifiers.chat_calls += 1
                try:
                    apply_plan(ontology, kg, plan)
                except PlanRejected as exc:
                    log.warning("qualifier %s[%d]: %s", tid, i, exc)
                    plan.note = str(exc)
                    plan.outcome = Outcome.DECLINED
                report.plans.append(plan)
                _book(report.qualifiers, plan)
                if plan.triple_id != tid:
                    break  # coalesced into an earlier triple
            i += 1
    return report
