import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oakmend.canon import (
    UNMAPPED, CanonContext, Catalog, Canonicalizer, EmptyCatalogError, candidate_band, canonicalize_graph,
    cluster_entities, dedup_entities,
)
from oakmend.extract import OpenGraph, chunk_corpus, extract_corpus, parse_open_entry, read_corpus
from oakmend.kgmodel import KnowledgeGraph, LiteralKind, dumps_kg
from oakmend.llmgate import ChatClient, EmbeddingClient, ScriptedChat, TokenLedger, TrigramEmbedder

from .conftest import TOY


@pytest.fixture(scope="module")
def shared_embed():
    return EmbeddingClient(TrigramEmbedder())


@pytest.fixture(scope="module")
def type_catalog(library_ontology, shared_embed):
    return Catalog.of_types(library_ontology, shared_embed)


def test_phi_takes_best_name_per_item(type_catalog, shared_embed):
    phi = type_catalog.phi("person")
    human = type_catalog.ids.index("human")
    assert phi[human] == pytest.approx(1.0)
    assert np.argmax(phi) == human


def test_empty_catalog(shared_embed):
    with pytest.raises(EmptyCatalogError):
        Catalog([], shared_embed).phi("x")


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz _", min_size=1, max_size=20).filter(str.strip),
       st.floats(0, 1))
def test_band_matches_definition(type_catalog, label, beta):
    band = candidate_band(label, type_catalog, beta)
    phi = type_catalog.phi(label)
    m = phi.max()
    assert band.m == pytest.approx(m)
    want = {type_catalog.ids[i] for i in range(len(phi)) if phi[i] >= m - beta}
    assert set(band.ids) == want
    assert band.argmax in want and phi[type_catalog.ids.index(band.argmax)] == m
    scores = [s for _, s in band.scored]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abcdefghij ", min_size=1, max_size=12).filter(str.strip), st.floats(0, 0.5),
       st.floats(0, 0.5))
def test_band_grows_with_beta(type_catalog, label, b1, b2):
    lo, hi = sorted((b1, b2))
    assert set(candidate_band(label, type_catalog, lo).ids) <= set(candidate_band(label, type_catalog, hi).ids)


def test_negative_beta_rejected(type_catalog):
    with pytest.raises(ValueError):
        candidate_band("x", type_catalog, -0.1)


def make_canon(ontology, embed, script, beta=0.05, **kw):
    chat = ChatClient(script, TokenLedger())
    return Canonicalizer(ontology, chat, embed, beta=beta, **kw), chat


def test_single_candidate_band_costs_no_call(library_ontology, shared_embed):
    canon, chat = make_canon(library_ontology, shared_embed, ScriptedChat(), beta=0.0)
    assert canon.canonicalize_type("mathematician") == "mathematician"
    assert chat.ledger.calls() == 0


def test_multi_candidate_band_asks_once_and_caches(library_ontology, shared_embed):
    script = ScriptedChat().on("canon_type", "## Extracted entity type\nscholar", "human")
    canon, chat = make_canon(library_ontology, shared_embed, script, beta=1.0)
    ctx = CanonContext("Gauss was a scholar.", ["Gauss"])
    assert canon.canonicalize_type("scholar", ctx) == "human"
    assert canon.canonicalize_type("scholar", ctx) == "human"
    assert chat.ledger.calls("canon_type") == 1


def test_answer_matching_accepts_label_alias_or_display(library_ontology, shared_embed):
    for answer, want in [("- Person.", "human"), ("`written work`", "written_work"), ('"book"', "book")]:
        script = ScriptedChat().on("canon_type", "scholar", answer)
        canon, _ = make_canon(library_ontology, shared_embed, script, beta=1.0)
        assert canon.canonicalize_type("scholar") == want


def test_out_of_band_answer_retries_then_falls_back_to_argmax(library_ontology, shared_embed):
    script = ScriptedChat().on("canon_type", "thing", "dragon")
    canon, chat = make_canon(library_ontology, shared_embed, script, beta=1.0)
    band = candidate_band("written thing", canon.catalog("types"), 1.0)
    assert canon.canonicalize_type("written thing") == band.argmax
    assert chat.ledger.calls("canon_type") == 2


def test_predicate_floor_gives_unmapped(library_ontology, shared_embed):
    canon, chat = make_canon(library_ontology, shared_embed, ScriptedChat(), predicate_floor=0.99)
    assert canon.canonicalize_predicate("zzqx vvw") == UNMAPPED
    assert chat.ledger.calls() == 0


def test_qualifiers_map_by_argmax_without_calls(library_ontology, shared_embed):
    canon, chat = make_canon(library_ontology, shared_embed, ScriptedChat(), beta=1.0)
    assert canon.canonicalize_qualifier_predicate("point in time") == "point_in_time"
    assert canon.canonicalize_qualifier_predicate("started") in {q.id for q in library_ontology.qualifier_predicates()}
    assert chat.ledger.calls() == 0


def test_context_is_capped():
    ctx = CanonContext("t", [str(i) for i in range(50)], [(str(i), str(i)) for i in range(50)], cap=20)
    assert len(ctx.entities_with_type) == 20 and len(ctx.entity_pairs) == 20


def entry(s, p, o, st_, ot, quals=()):
    return {"triple": [s, p, o], "subject_type": st_, "object_type": ot,
            "qualifiers": [{"pair": [qp, qo], "object_type": qt} for qp, qo, qt in quals]}


def test_graph_assembly_merges_chunks_and_quarantines(library_ontology, shared_embed):
    raw = {
        "d#0": [entry("Alan Turing", "educated at", "Princeton", "human", "university",
                      [("point in time", "1938", "date")]),
                entry("1938", "educated at", "Princeton", "date", "university"),
                entry("Alan Turing", "zzqx vvw", "Princeton", "human", "university")],
        "d#1": [entry("alan turing", "educated at", "Cambridge", "mathematician", "university")],
    }
    og = OpenGraph.build({c: [parse_open_entry(e, c) for e in es] for c, es in raw.items()})
    canon, chat = make_canon(library_ontology, shared_embed, ScriptedChat(), beta=0.0, predicate_floor=0.6)
    res = canonicalize_graph(og, {"d#0": "text0", "d#1": "text1"}, canon)
    kg = res.kg
    assert kg.ontology_hash == library_ontology.content_hash
    assert len(kg) == 2
    turing = kg.find_by_label("Alan Turing")[0]
    assert turing.types == {"human", "mathematician"}
    assert turing.provenance == {"d#0", "d#1"}
    assert kg.find_by_label("1938")[0].literal_kind == LiteralKind.DATE
    reasons = sorted(q["reason"] for q in res.quarantine)
    assert reasons == ["literal-subject", "unmapped-predicate"]
    assert res.mapping["predicates"]["educated at"] == "educated_at"
    assert res.mapping["qualifiers"]["point in time"] == "point_in_time"


def test_parallel_canonicalization_matches_serial(toy_ontology):
    script = ScriptedChat.from_file(TOY / "mock" / "chat.json")
    chunks = chunk_corpus(read_corpus(TOY / "corpus.jsonl"))
    og, _ = extract_corpus(chunks, ChatClient(script))
    texts = {c.id: c.text for c in chunks}
    outs = []
    for par in (1, 4):
        canon = Canonicalizer(toy_ontology, ChatClient(script), EmbeddingClient(TrigramEmbedder()))
        outs.append(dumps_kg(canonicalize_graph(og, texts, canon, parallelism=par).kg))
    assert outs[0] == outs[1]


def dedup_kg():
    kg = KnowledgeGraph()
    a = kg.add_entity("Secker and Warburg", ["organization"]).id
    b = kg.add_entity("Secker and Warburg Ltd", ["organization"]).id
    c = kg.add_entity("Nineteen Eighty-Four", ["book"]).id
    d = kg.add_entity("1949", literal_kind=LiteralKind.DATE).id
    d2 = kg.add_entity("1949.", literal_kind=LiteralKind.DATE).id
    kg.add_triple(c, "publisher", a)
    kg.add_triple(c, "publisher", b)
    kg.add_triple(c, "publication_date", d)
    kg.add_triple(c, "publication_date", d2)
    return kg, a, b


def test_clusters_exclude_literals(shared_embed):
    kg, a, b = dedup_kg()
    clusters = cluster_entities(kg, shared_embed, threshold=0.8)
    assert [a, b] in clusters
    assert all(not kg.entities[e].is_literal for g in clusters for e in g)


def test_dedup_merges_and_coalesces(shared_embed):
    kg, a, b = dedup_kg()
    script = ScriptedChat().on("dedup", "Secker and Warburg Ltd",
                               {"duplicates": ["Secker and Warburg Ltd"], "alias": "Secker & Warburg"})
    kg, rep = dedup_entities(kg, shared_embed, ChatClient(script), threshold=0.8)
    assert rep.merged_entities == 1 and rep.chat_calls == 1
    assert kg.entities[a].label == "Secker & Warburg"
    assert b not in kg.entities
    assert len(kg) == 3
    assert kg.indexes() == kg.rebuild_indexes()


def test_dedup_empty_answer_keeps_entities(shared_embed):
    kg, a, b = dedup_kg()
    script = ScriptedChat().on("dedup", "Secker", {})
    kg, rep = dedup_entities(kg, shared_embed, ChatClient(script), threshold=0.8)
    assert rep.merged_entities == 0 and b in kg.entities and len(kg) == 4
