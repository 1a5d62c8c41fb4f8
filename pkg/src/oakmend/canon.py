"""Map open-domain types and predicates onto the ontology, and deduplicate
entities.

Types and predicates are scored by embedding similarity against every label
and alias of every catalog item. Items within ``beta`` of the best score form
a candidate band; a band of one is taken as-is, larger bands are resolved by a
single chat call. Qualifier predicates are mapped by pure argmax.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .extract import OpenGraph, parse_json_payload, sniff_literal
from .kgmodel import KnowledgeGraph, Qualifier, merge_graphs, normalize_label, id_sort_key
from .llmgate import ChatClient, EmbeddingClient, Stage
from .ontology import Ontology
from .prompts import canon_pred_prompt, canon_type_prompt, dedup_prompt

log = logging.getLogger(__name__)

UNMAPPED = "<unmapped>"


class EmptyCatalogError(ValueError):
    pass


@dataclass
class CatalogItem:
    id: str
    label: str
    names: tuple[str, ...]

    @property
    def display(self) -> str:
        return self.label if self.label == self.id else f"{self.label} ({self.id})"


class Catalog:
    """Catalog items plus the embedding matrix of all their names."""

    def __init__(self, items: Sequence[CatalogItem], embed: EmbeddingClient):
        self.items = list(items)
        self.ids = [it.id for it in self.items]
        names, owner = [], []
        for i, it in enumerate(self.items):
            for n in it.names:
                names.append(n)
                owner.append(i)
        self.owner = np.asarray(owner, dtype=np.int64)
        self.matrix = np.vstack(embed.embed_many(names)) if names else np.zeros((0, 0))
        self.embed = embed

    def __len__(self) -> int:
        return len(self.items)

    def phi(self, query: str) -> np.ndarray:
        """Max cosine between the query and any name of each item."""
        if not self.items:
            raise EmptyCatalogError("catalog is empty")
        q = self.embed.embed(query)
        sims = self.matrix @ q
        out = np.full(len(self.items), -np.inf)
        np.maximum.at(out, self.owner, sims)
        return out

    @classmethod
    def of_types(cls, ontology: Ontology, embed: EmbeddingClient) -> "Catalog":
        return cls([CatalogItem(t.id, t.label, tuple(dict.fromkeys((t.label, *t.aliases))))
                    for t in (ontology.types[i] for i in sorted(ontology.types))], embed)

    @classmethod
    def of_predicates(cls, specs, embed: EmbeddingClient) -> "Catalog":
        return cls([CatalogItem(p.id, p.label, tuple(dict.fromkeys(p.names))) for p in specs], embed)


@dataclass
class CandidateSet:
    query_label: str
    scored: list[tuple[str, float]]
    m: float
    beta: float

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.scored]

    @property
    def argmax(self) -> str:
        return self.scored[0][0]


def candidate_band(query_label: str, catalog: Catalog, beta: float) -> CandidateSet:
    """Catalog items whose score is within `beta` of the best score, best first
    (ties broken by id)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    phi = catalog.phi(query_label)
    m = float(phi.max())
    keep = [(catalog.ids[i], float(phi[i])) for i in range(len(catalog)) if phi[i] >= m - beta]
    keep.sort(key=lambda x: (-x[1], x[0]))
    return CandidateSet(query_label, keep, m, beta)


@dataclass
class CanonContext:
    source_text: str = ""
    entities_with_type: list[str] = field(default_factory=list)
    entity_pairs: list[tuple[str, str]] = field(default_factory=list)
    cap: int = 20

    def __post_init__(self):
        self.entities_with_type = list(self.entities_with_type)[: self.cap]
        self.entity_pairs = list(self.entity_pairs)[: self.cap]


class CanonCache:
    """Open label -> canonical id, first writer wins per key."""

    def __init__(self):
        self.types: dict[str, str] = {}
        self.predicates: dict[str, str] = {}
        self.qualifiers: dict[str, str] = {}
        self._lock = threading.Lock()

    def put(self, table: dict, key: str, value: str) -> str:
        with self._lock:
            return table.setdefault(key, value)

    def to_dict(self) -> dict:
        return {"types": dict(self.types), "predicates": dict(self.predicates), "qualifiers": dict(self.qualifiers)}


def _match_answer(reply: str, band: CandidateSet, catalog: Catalog) -> Optional[str]:
    lines = [ln for ln in reply.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    ans = lines[0].strip().strip("`").strip()
    if ans.startswith("- "):
        ans = ans[2:]
    ans = ans.strip().strip("\"'").rstrip(".").strip().casefold()
    members = [catalog.items[catalog.ids.index(i)] for i in band.ids]
    for match in (lambda it: it.display.casefold() == ans,
                  lambda it: it.id.casefold() == ans,
                  lambda it: it.label.casefold() == ans,
                  lambda it: ans in (n.casefold() for n in it.names)):
        hits = [it.id for it in members if match(it)]
        if hits:
            return hits[0]
    return None


class Canonicalizer:
    def __init__(self, ontology: Ontology, chat: ChatClient, embed: EmbeddingClient, beta: float = 0.05,
                 context_cap: int = 20, predicate_floor: float = 0.3):
        if not 0 <= beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        self.ontology = ontology
        self.chat = chat
        self.embed = embed
        self.beta = beta
        self.context_cap = context_cap
        self.predicate_floor = predicate_floor
        self.cache = CanonCache()
        self._catalogs: dict[str, Catalog] = {}
        self._cat_lock = threading.Lock()

    def catalog(self, kind: str) -> Catalog:
        with self._cat_lock:
            if kind not in self._catalogs:
                if kind == "types":
                    cat = Catalog.of_types(self.ontology, self.embed)
                elif kind == "predicates":
                    cat = Catalog.of_predicates(self.ontology.main_predicates(), self.embed)
                else:
                    cat = Catalog.of_predicates(self.ontology.qualifier_predicates(), self.embed)
                self._catalogs[kind] = cat
            return self._catalogs[kind]

    def _choose(self, stage: Stage, band: CandidateSet, catalog: Catalog, prompt: str) -> str:
        for attempt in range(2):
            reply = self.chat.chat(stage, prompt)
            got = _match_answer(reply, band, catalog)
            if got is not None:
                return got
            log.warning("%s: answer %r for %r is outside the band (attempt %d)", stage.value, reply[:80],
                        band.query_label, attempt + 1)
        return band.argmax

    def canonicalize_type(self, open_type: str, context: Optional[CanonContext] = None) -> str:
        hit = self.cache.types.get(open_type)
        if hit is not None:
            return hit
        context = context or CanonContext(cap=self.context_cap)
        catalog = self.catalog("types")
        band = candidate_band(open_type, catalog, self.beta)
        if len(band.scored) == 1:
            chosen = band.argmax
        else:
            cands = [catalog.items[catalog.ids.index(i)].display for i in band.ids]
            prompt = canon_type_prompt(context.source_text, context.entities_with_type, open_type, cands)
            chosen = self._choose(Stage.CANON_TYPE, band, catalog, prompt)
        return self.cache.put(self.cache.types, open_type, chosen)

    def canonicalize_predicate(self, open_pred: str, context: Optional[CanonContext] = None) -> str:
        hit = self.cache.predicates.get(open_pred)
        if hit is not None:
            return hit
        context = context or CanonContext(cap=self.context_cap)
        catalog = self.catalog("predicates")
        band = candidate_band(open_pred, catalog, self.beta)
        if band.m < self.predicate_floor:
            chosen = UNMAPPED
        elif len(band.scored) == 1:
            chosen = band.argmax
        else:
            cands = [catalog.items[catalog.ids.index(i)].display for i in band.ids]
            prompt = canon_pred_prompt(context.source_text, context.entity_pairs, open_pred, cands)
            chosen = self._choose(Stage.CANON_PRED, band, catalog, prompt)
        return self.cache.put(self.cache.predicates, open_pred, chosen)

    def canonicalize_qualifier_predicate(self, open_label: str) -> str:
        hit = self.cache.qualifiers.get(open_label)
        if hit is not None:
            return hit
        band = candidate_band(open_label, self.catalog("qualifiers"), 0.0)
        return self.cache.put(self.cache.qualifiers, open_label, band.argmax)


@dataclass
class CanonResult:
    kg: KnowledgeGraph
    quarantine: list[dict]
    mapping: dict


def canonicalize_graph(open_graph: OpenGraph, chunk_texts: dict[str, str], canon: Canonicalizer,
                       parallelism: int = 1) -> CanonResult:
    """Canonicalize every distinct open label, then assemble the typed KG.

    Each chunk becomes its own graph (entities keyed by normalized label) and
    the chunk graphs are merged by label. Triples whose predicate is unmapped
    or whose subject is a literal are set aside in the quarantine list.
    """
    cap = canon.context_cap

    def type_job(label):
        ctx = CanonContext(chunk_texts.get(open_graph.type_first_chunk.get(label, ""), ""),
                           open_graph.type_entities.get(label, []), cap=cap)
        return canon.canonicalize_type(label, ctx)

    def pred_job(label):
        ctx = CanonContext(chunk_texts.get(open_graph.predicate_first_chunk.get(label, ""), ""),
                           entity_pairs=open_graph.predicate_pairs.get(label, []), cap=cap)
        return canon.canonicalize_predicate(label, ctx)

    type_labels = list(open_graph.type_entities)
    pred_labels = list(open_graph.predicate_pairs)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            type_ids = list(pool.map(type_job, type_labels))
            pred_ids = list(pool.map(pred_job, pred_labels))
    else:
        type_ids = [type_job(x) for x in type_labels]
        pred_ids = [pred_job(x) for x in pred_labels]
    tmap = dict(zip(type_labels, type_ids))
    pmap = dict(zip(pred_labels, pred_ids))
    qmap = {q: canon.canonicalize_qualifier_predicate(q) for q in open_graph.qualifier_predicates}

    ohash = canon.ontology.content_hash
    graphs = []
    quarantine = []
    for cid, triples in open_graph.chunks.items():
        g = KnowledgeGraph(ontology_hash=ohash)

        def ent(label: str, type_label: str):
            found = g.find_by_label(label)
            if found:
                e = found[0]
                e.types.add(tmap[type_label])
                if e.literal_kind is None:
                    e.literal_kind = sniff_literal(label, type_label)
                return e.id
            return g.add_entity(label, {tmap[type_label]}, literal_kind=sniff_literal(label, type_label),
                                provenance={cid}).id

        for t in triples:
            pred = pmap[t.predicate_label]
            if pred == UNMAPPED:
                quarantine.append({"chunk": cid, "reason": "unmapped-predicate", "triple": t.to_dict()})
                continue
            existing = g.find_by_label(t.subject_label)
            subj_literal = (existing[0].is_literal if existing
                            else sniff_literal(t.subject_label, t.subject_type_label) is not None)
            if subj_literal:
                quarantine.append({"chunk": cid, "reason": "literal-subject", "triple": t.to_dict()})
                continue
            s = ent(t.subject_label, t.subject_type_label)
            if g.entities[s].is_literal:
                quarantine.append({"chunk": cid, "reason": "literal-subject", "triple": t.to_dict()})
                continue
            o = ent(t.object_label, t.object_type_label)
            quals = [Qualifier(qmap[q.predicate_label], ent(q.object_label, q.object_type_label))
                     for q in t.qualifiers]
            g.add_triple(s, pred, o, quals, cid)
        graphs.append(g)
    kg = merge_graphs(graphs) if graphs else KnowledgeGraph(ontology_hash=ohash)
    kg.ontology_hash = ohash
    # an entity may only have become literal after merging; such subjects are set aside too
    for tid in kg.triple_ids():
        t = kg.triples[tid]
        if kg.entities[t.subject].is_literal:
            kg.remove_triple(tid)
            quarantine.append({"chunk": t.provenance, "reason": "literal-subject", "triple_id": tid})
    for eid in kg.entity_ids():
        if not kg.incident.get(eid):
            kg.remove_entity(eid)
    return CanonResult(kg, quarantine, {"types": tmap, "predicates": pmap, "qualifiers": qmap})


# -- deduplication --------------------------------------------------------------

def cluster_entities(kg: KnowledgeGraph, embed: EmbeddingClient, threshold: float = 0.9) -> list[list[str]]:
    """Single-link clusters of non-literal entities whose label embeddings have
    cosine >= threshold. Literal entities never enter a cluster."""
    ids = [e for e in kg.entity_ids() if not kg.entities[e].is_literal]
    if not ids:
        return []
    mat = np.vstack(embed.embed_many([kg.entities[e].label for e in ids]))
    parent = list(range(len(ids)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(ids) - 1):
        sims = mat[i + 1:] @ mat[i]
        for off in np.nonzero(sims >= threshold)[0]:
            a, b = find(i), find(i + 1 + int(off))
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: dict[int, list[str]] = {}
    for i, eid in enumerate(ids):
        groups.setdefault(find(i), []).append(eid)
    return [sorted(g, key=id_sort_key) for g in groups.values()]


@dataclass
class DedupReport:
    clusters: int = 0
    multi_clusters: int = 0
    merged_entities: int = 0
    chat_calls: int = 0


def dedup_entities(kg: KnowledgeGraph, embed: EmbeddingClient, chat: ChatClient, threshold: float = 0.9
                   ) -> tuple[KnowledgeGraph, DedupReport]:
    """Merge near-duplicate entities in place and return the graph.

    Within each multi-member cluster, members are taken as pivots in id order;
    each pivot costs one chat call naming its duplicates among the remaining
    members and the label the merged entity should carry.
    """
    report = DedupReport()
    clusters = cluster_entities(kg, embed, threshold)
    report.clusters = len(clusters)
    for members in clusters:
        if len(members) < 2:
            continue
        report.multi_clusters += 1
        remaining = list(members)
        while len(remaining) >= 2:
            pivot, cands = remaining[0], remaining[1:]
            reply = chat.chat(Stage.DEDUP, dedup_prompt(kg.entities[pivot].label,
                                                        [kg.entities[c].label for c in cands]))
            report.chat_calls += 1
            try:
                payload = parse_json_payload(reply)
            except ValueError:
                log.warning("dedup: unparseable reply for %r", kg.entities[pivot].label)
                payload = {}
            dups: list[str] = []
            alias = None
            if isinstance(payload, dict):
                wanted = {normalize_label(str(d)) for d in payload.get("duplicates") or [] if str(d).strip()}
                dups = [c for c in cands if normalize_label(kg.entities[c].label) in wanted]
                a = payload.get("alias")
                alias = " ".join(str(a).split()) if a and str(a).strip() else None
            if dups:
                kg.merge_entities(pivot, dups, label=alias)
                report.merged_entities += len(dups)
            remaining = [c for c in cands if c not in dups]
    return kg, report
