"""Basic-graph-pattern benchmark.

Parses and normalizes pattern bodies, generates artificial patterns from the
domain/range graph of an ontology, counts matches over the valid part of a KG
and summarizes the counts with h-index style metrics.
"""
from __future__ import annotations

import json
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .kgmodel import KnowledgeGraph
from .ontology import Ontology
from .validate import triple_is_valid

ANY = "any"

TEMPLATES: dict[str, tuple[tuple[int, int], ...]] = {
    "2p": ((1, 2), (2, 3)),
    "2i": ((1, 3), (2, 3)),
    "1p2i": ((1, 2), (2, 4), (3, 4)),
    "2i1p": ((1, 3), (2, 3), (3, 4)),
    "3p": ((1, 2), (2, 3), (3, 4)),
    "3i": ((1, 4), (2, 4), (3, 4)),
    "r-2i": ((1, 2), (1, 3)),
    "r-1p2i": ((1, 2), (1, 3), (2, 4)),
    "r-2i1p": ((1, 2), (2, 3), (2, 4)),
    "r-3i": ((1, 2), (1, 3), (1, 4)),
}
LOG_DERIVED = "log-derived"
TAGS = (*TEMPLATES, LOG_DERIVED)


class BGPSyntaxError(ValueError):
    def __init__(self, position: int, msg: str):
        super().__init__(f"token {position}: {msg}")
        self.position = position


class UnknownPredicateError(ValueError):
    pass


def is_variable(term: str) -> bool:
    return term.startswith("?")


@dataclass(frozen=True)
class TriplePattern:
    subject: str
    predicate: str
    object: str

    def variables(self) -> set[str]:
        return {t for t in (self.subject, self.object) if is_variable(t)}


@dataclass
class BasicGraphPattern:
    patterns: list[TriplePattern]
    template_tag: Optional[str] = None

    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in self.patterns:
            for t in (p.subject, p.object):
                if is_variable(t):
                    seen[t] = None
        return list(seen)

    def predicates(self) -> list[str]:
        return [p.predicate for p in self.patterns]

    def __len__(self) -> int:
        return len(self.patterns)


# -- parsing -----------------------------------------------------------------

def _predicate_lookup(ontology: Ontology) -> dict[str, str]:
    squash = lambda s: re.sub(r"[\s_\-]+", "", s).casefold()
    table: dict[str, str] = {}
    for spec in sorted(ontology.predicates.values(), key=lambda p: p.id):
        for name in (spec.id, *spec.names):
            table.setdefault(name.casefold(), spec.id)
            table.setdefault(squash(name), spec.id)
    return table


def _tokens(text: str) -> list[str]:
    out = []
    for raw in text.split():
        if raw in ("{", "}"):
            continue
        if raw != "." and raw.endswith(".") and not raw.endswith(".."):
            out += [raw[:-1], "."]
        else:
            out.append(raw)
    return out


def parse_bgp(text: str, ontology: Optional[Ontology] = None, template_tag: Optional[str] = None
              ) -> BasicGraphPattern:
    """Parse ``term pred term . term pred term .`` (the final period is optional).

    Predicate tokens may carry a trailing ``:``. With an ontology, predicates
    are resolved by id, label or alias (spacing in labels may be dropped, so
    ``awardReceived:`` finds "award received").
    """
    lookup = _predicate_lookup(ontology) if ontology is not None else None
    toks = _tokens(text.split("#", 1)[0])
    patterns = []
    i = 0
    while i < len(toks):
        group = toks[i:i + 3]
        for j, tok in enumerate(group):
            if tok == ".":
                raise BGPSyntaxError(i + j + 1, "unexpected '.'")
        if len(group) >= 2 and is_variable(group[1]):
            raise BGPSyntaxError(i + 2, f"predicate must be ground, got variable {group[1]!r}")
        if len(group) < 3:
            raise BGPSyntaxError(i + len(group) + 1, "incomplete triple pattern")
        s, p, o = group
        for j, term in ((0, s), (2, o)):
            if term == "?" or term.endswith(":"):
                raise BGPSyntaxError(i + j + 1, f"bad term {term!r}")
        pname = p[:-1] if p.endswith(":") and len(p) > 1 else p
        if lookup is not None:
            pid = lookup.get(pname.casefold()) or lookup.get(re.sub(r"[\s_\-]+", "", pname).casefold())
            if pid is None:
                raise UnknownPredicateError(f"unknown predicate {pname!r}")
            pname = pid
        patterns.append(TriplePattern(s, pname, o))
        i += 3
        if i < len(toks):
            if toks[i] != ".":
                raise BGPSyntaxError(i + 1, f"expected '.', got {toks[i]!r}")
            i += 1
    if not patterns:
        raise BGPSyntaxError(1, "empty pattern")
    return BasicGraphPattern(patterns, template_tag)


def format_bgp(bgp: BasicGraphPattern) -> str:
    return " ".join(f"{p.subject} {p.predicate} {p.object} ." for p in bgp.patterns)


def _connected(patterns: list[TriplePattern]) -> bool:
    parent: dict[str, str] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in patterns:
        parent[find(p.subject)] = find(p.object)
    return len({find(t) for p in patterns for t in (p.subject, p.object)}) == 1


def normalize_bgp(bgp: BasicGraphPattern) -> Optional[BasicGraphPattern]:
    """Generalize constants to fresh variables, then apply the benchmark
    filter. Returns None when the pattern is rejected."""
    taken = set(bgp.variables())
    fresh: dict[str, str] = {}
    n = 0

    def gen(term: str) -> str:
        nonlocal n
        if is_variable(term):
            return term
        if term not in fresh:
            while True:
                n += 1
                name = f"?c{n}"
                if name not in taken:
                    break
            fresh[term] = name
        return fresh[term]

    pats = [TriplePattern(gen(p.subject), p.predicate, gen(p.object)) for p in bgp.patterns]
    preds = [p.predicate for p in pats]
    if len(pats) < 2 or len(set(preds)) != len(preds) or not _connected(pats):
        return None
    return BasicGraphPattern(pats, bgp.template_tag or LOG_DERIVED)


# -- isomorphism dedup ---------------------------------------------------------

def canonical_key(bgp: BasicGraphPattern) -> tuple:
    """Canonical form for patterns whose predicates are pairwise distinct:
    the predicate fixes which pattern maps to which, so variable names are
    assigned by first appearance in predicate order."""
    names: dict[str, str] = {}
    rename = lambda v: v if not is_variable(v) else names.setdefault(v, f"?v{len(names)}")
    return tuple((p.predicate, rename(p.subject), rename(p.object))
                 for p in sorted(bgp.patterns, key=lambda p: p.predicate))


def isomorphic(a: BasicGraphPattern, b: BasicGraphPattern) -> bool:
    """Predicate-exact directed isomorphism via backtracking over pattern
    correspondences (used when predicates repeat)."""
    if sorted(a.predicates()) != sorted(b.predicates()) or len(a.variables()) != len(b.variables()):
        return False
    pa, pb = a.patterns, b.patterns
    used = [False] * len(pb)

    def bind(m, inv, x, y):
        if is_variable(x) != is_variable(y):
            return None
        if not is_variable(x):
            return (m, inv) if x == y else None
        if m.get(x, y) != y or inv.get(y, x) != x:
            return None
        return {**m, x: y}, {**inv, y: x}

    def search(i, m, inv):
        if i == len(pa):
            return True
        p = pa[i]
        for j, q in enumerate(pb):
            if used[j] or q.predicate != p.predicate:
                continue
            r = bind(m, inv, p.subject, q.subject)
            r = r and bind(*r, p.object, q.object)
            if r:
                used[j] = True
                if search(i + 1, *r):
                    return True
                used[j] = False
        return False

    return search(0, {}, {})


def dedup_bgps(bgps: Iterable[BasicGraphPattern]) -> list[BasicGraphPattern]:
    """Keep the first of every isomorphism class, preserving input order."""
    out: list[BasicGraphPattern] = []
    seen_keys: set[tuple] = set()
    buckets: dict[tuple, list[BasicGraphPattern]] = defaultdict(list)
    for bgp in bgps:
        preds = tuple(sorted(bgp.predicates()))
        if len(set(preds)) == len(preds):
            key = canonical_key(bgp)
            if key in seen_keys:
                continue
            seen_keys.add(key)
        else:
            if any(isomorphic(bgp, other) for other in buckets[preds]):
                continue
            buckets[preds].append(bgp)
        out.append(bgp)
    return out


# -- files -----------------------------------------------------------------------

def load_bgp_file(path: Union[str, Path], ontology: Optional[Ontology] = None,
                  normalize: bool = True) -> list[BasicGraphPattern]:
    """One pattern body per line; ``#`` starts a comment. A trailing comment
    naming a template tag (``# 2p``) is kept as the pattern's tag."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        body, _, comment = line.partition("#")
        if not body.strip():
            continue
        tag = comment.strip() if comment.strip() in TAGS else None
        try:
            bgp = parse_bgp(body, ontology, tag)
        except (BGPSyntaxError, UnknownPredicateError) as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
        if normalize:
            bgp = normalize_bgp(bgp)
            if bgp is None:
                continue
        out.append(bgp)
    return dedup_bgps(out) if normalize else out


def dumps_bgps(bgps: Iterable[BasicGraphPattern]) -> str:
    lines = [format_bgp(b) + (f"  # {b.template_tag}" if b.template_tag else "") for b in bgps]
    return "\n".join(lines) + ("\n" if lines else "")


def write_bgp_file(path: Union[str, Path], bgps: Iterable[BasicGraphPattern]) -> None:
    Path(path).write_text(dumps_bgps(bgps), encoding="utf-8")


# -- artificial generation ------------------------------------------------------

@dataclass
class OntologyKG:
    """Types as nodes (plus ``any``), one edge per dom x rng combination."""
    nodes: set[str] = field(default_factory=set)
    edges: list[tuple[str, str, str]] = field(default_factory=list)
    descendants: dict[str, frozenset] = field(default_factory=dict)

    def predicates(self) -> list[str]:
        return sorted({r for _, r, _ in self.edges})

    def side(self, predicate: str, position: int) -> Optional[frozenset]:
        """Types admissible at one end of `predicate` after subtype closure,
        or None when that end is ``any``."""
        ends = {e[position] for e in self.edges if e[1] == predicate}
        if ANY in ends:
            return None
        return frozenset().union(*(self.descendants[t] for t in ends))


def build_ontology_kg(ontology: Ontology, predicate_subset: Optional[Iterable[str]] = None) -> OntologyKG:
    """Predicates constraining neither side carry no type information and are
    left out. Defaults to every main (non-qualifier) predicate."""
    if predicate_subset is None:
        ids = [p.id for p in ontology.main_predicates()]
    else:
        ids = list(predicate_subset)
    okg = OntologyKG(descendants={t: frozenset(ontology.descendants(t)) for t in ontology.types})
    for pid in sorted(set(ids)):
        spec = ontology.predicate(pid)
        if spec.domain is None and spec.range is None:
            continue
        dom = sorted(spec.domain) if spec.domain is not None else [ANY]
        rng = sorted(spec.range) if spec.range is not None else [ANY]
        for ts in dom:
            for to in rng:
                okg.edges.append((ts, pid, to))
                okg.nodes.update((ts, to))
    return okg


def _meet(a: Optional[frozenset], b: Optional[frozenset]) -> Optional[frozenset]:
    if a is None:
        return b
    if b is None:
        return a
    return a & b


def template_bgp(template: str, predicates: Iterable[str]) -> BasicGraphPattern:
    slots = TEMPLATES[template]
    pats = [TriplePattern(f"?x{s}", r, f"?x{o}") for (s, o), r in zip(slots, predicates)]
    return BasicGraphPattern(pats, template)


def generate_bgps(okg: OntologyKG, template: str, cap: int = 10_000, seed: int = 0) -> list[BasicGraphPattern]:
    """Every assignment of distinct predicates to the template's slots whose
    meeting nodes admit a common type, deduplicated, then sampled down to
    `cap` with `seed` when there are more."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; expected one of {sorted(TEMPLATES)}")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    slots = TEMPLATES[template]
    preds = okg.predicates()
    subj = {r: okg.side(r, 0) for r in preds}
    obj = {r: okg.side(r, 2) for r in preds}
    found: list[BasicGraphPattern] = []

    def search(i: int, chosen: list[str], nodes: dict[int, Optional[frozenset]]):
        if i == len(slots):
            found.append(template_bgp(template, chosen))
            return
        s, o = slots[i]
        for r in preds:
            if r in chosen:
                continue
            ns = _meet(nodes.get(s), subj[r]) if s in nodes else subj[r]
            if ns is not None and not ns:
                continue
            trial = {**nodes, s: ns}
            no = _meet(trial.get(o), obj[r]) if o in trial else obj[r]
            if no is not None and not no:
                continue
            trial[o] = no
            search(i + 1, chosen + [r], trial)

    search(0, [], {})
    unique = sorted(dedup_bgps(found), key=format_bgp)
    if len(unique) > cap:
        unique = random.Random(seed).sample(unique, cap)
    return unique


# -- matching ----------------------------------------------------------------------

class TripleIndex:
    """Distinct (s, p, o) facts with per-predicate lookups."""

    def __init__(self, triples: Iterable[tuple[str, str, str]] = ()):
        self.facts: set[tuple[str, str, str]] = set()
        self.pairs: dict[str, set[tuple[str, str]]] = defaultdict(set)
        self.by_sp: dict[tuple[str, str], set[str]] = defaultdict(set)
        self.by_po: dict[tuple[str, str], set[str]] = defaultdict(set)
        for t in triples:
            self.add(*t)

    def add(self, s: str, p: str, o: str) -> None:
        if (s, p, o) in self.facts:
            return
        self.facts.add((s, p, o))
        self.pairs[p].add((s, o))
        self.by_sp[(s, p)].add(o)
        self.by_po[(p, o)].add(s)

    @classmethod
    def from_kg(cls, kg: KnowledgeGraph, ontology: Optional[Ontology] = None) -> "TripleIndex":
        """With an ontology, only violation-free triples enter the index."""
        idx = cls()
        for tid in kg.triple_ids():
            t = kg.triples[tid]
            if ontology is None or triple_is_valid(ontology, kg, t):
                idx.add(t.subject, t.predicate, t.object)
        return idx

    def __len__(self) -> int:
        return len(self.facts)


def _order_patterns(index: TripleIndex, patterns: list[TriplePattern]) -> list[TriplePattern]:
    size = lambda p: len(index.pairs.get(p.predicate, ()))
    remaining = list(range(len(patterns)))
    first = min(remaining, key=lambda i: (size(patterns[i]), i))
    order = [first]
    remaining.remove(first)
    bound = patterns[first].variables()
    while remaining:
        linked = [i for i in remaining if patterns[i].variables() & bound or not patterns[i].variables()]
        pick = min(linked or remaining, key=lambda i: (size(patterns[i]), i))
        order.append(pick)
        remaining.remove(pick)
        bound |= patterns[pick].variables()
    return [patterns[i] for i in order]


def match_count(source: Union[TripleIndex, KnowledgeGraph], bgp: BasicGraphPattern,
                ontology: Optional[Ontology] = None) -> int:
    """Number of distinct variable assignments satisfying every pattern.

    Distinct variables may bind the same entity. Non-variable terms must
    match literally. A KG source is filtered to valid triples when an
    ontology is given.
    """
    index = source if isinstance(source, TripleIndex) else TripleIndex.from_kg(source, ontology)
    if not bgp.patterns:
        return 0
    order = _order_patterns(index, bgp.patterns)

    def candidates(p: TriplePattern, env: dict[str, str]):
        s = env.get(p.subject, p.subject) if is_variable(p.subject) else p.subject
        o = env.get(p.object, p.object) if is_variable(p.object) else p.object
        s_free = is_variable(p.subject) and p.subject not in env
        o_free = is_variable(p.object) and p.object not in env
        if not s_free and not o_free:
            return [(s, o)] if (s, p.predicate, o) in index.facts else []
        if not s_free:
            return [(s, x) for x in index.by_sp.get((s, p.predicate), ())]
        if not o_free:
            return [(x, o) for x in index.by_po.get((p.predicate, o), ())]
        pairs = index.pairs.get(p.predicate, ())
        if p.subject == p.object:
            return [(a, b) for a, b in pairs if a == b]
        return list(pairs)

    def count(i: int, env: dict[str, str]) -> int:
        if i == len(order):
            return 1
        p = order[i]
        total = 0
        for s, o in candidates(p, env):
            new = dict(env)
            if is_variable(p.subject):
                new[p.subject] = s
            if is_variable(p.object):
                new[p.object] = o
            total += count(i + 1, new)
        return total

    return count(0, {})


# -- metrics -----------------------------------------------------------------------

def h_index(frequencies: Iterable[int]) -> int:
    h = 0
    for i, f in enumerate(sorted(frequencies, reverse=True), start=1):
        if f >= i:
            h = i
        else:
            break
    return h


def i_k_index(frequencies: Iterable[int], k: int) -> int:
    return sum(1 for f in frequencies if f >= k)


def edge_stats(source: Union[TripleIndex, KnowledgeGraph], ontology: Optional[Ontology] = None) -> dict:
    index = source if isinstance(source, TripleIndex) else TripleIndex.from_kg(source, ontology)
    per_pair: dict[tuple[str, str], set[str]] = defaultdict(set)
    for s, p, o in index.facts:
        per_pair[(s, o)].add(p)
    if not per_pair:
        return {"avg_multiplicity": None, "pct_pairs_multi": None}
    mult = [len(v) for v in per_pair.values()]
    return {"avg_multiplicity": sum(mult) / len(mult),
            "pct_pairs_multi": 100.0 * sum(1 for m in mult if m >= 2) / len(mult)}


def evaluate_bgps(kg: KnowledgeGraph, ontology: Ontology, bgps: list[BasicGraphPattern]) -> dict:
    index = TripleIndex.from_kg(kg, ontology)
    counts = [match_count(index, b) for b in bgps]
    stats = edge_stats(index)
    return {
        "h_index": h_index(counts),
        "i10_index": i_k_index(counts, 10),
        "i100_index": i_k_index(counts, 100),
        **stats,
        "per_bgp": [{"bgp": format_bgp(b), "count": c} for b, c in zip(bgps, counts)],
    }


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True)
