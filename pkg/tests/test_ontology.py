import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oakmend.ontology import OntologyError, load_ontology, read_ontology


def doc(types, predicates=()):
    return {"types": types, "predicates": list(predicates)}


def test_closure_is_reflexive_and_transitive(library_ontology):
    o = library_ontology
    assert o.ancestors("mathematician") == {"mathematician", "human", "entity"}
    assert o.is_subtype("book", "written_work")
    assert not o.is_subtype("written_work", "book")
    assert o.descendants("written_work") == {"written_work", "book"}


def test_types_satisfy_follows_subclass(library_ontology):
    o = library_ontology
    assert o.types_satisfy({"mathematician"}, {"human"})
    assert o.types_satisfy({"city", "mathematician"}, {"human"})
    assert not o.types_satisfy({"written_work"}, {"book"})
    assert not o.types_satisfy(set(), {"book"})
    # absent constraint admits anything, even no types
    assert o.types_satisfy(set(), None)


def test_types_satisfy_rejects_unknown_ids(library_ontology):
    with pytest.raises(OntologyError):
        library_ontology.types_satisfy({"dragon"}, {"human"})


def test_qualifier_allowed(library_ontology):
    o = library_ontology
    assert o.qualifier_allowed("educated_at", "point_in_time")
    assert not o.qualifier_allowed("educated_at", "color")
    assert o.qualifier_allowed("author", "color")  # no allow-list given
    with pytest.raises(OntologyError):
        o.qualifier_allowed("educated_at", "author")


def test_cycle_is_reported_with_path():
    d = doc([{"id": "a", "parents": ["b"]}, {"id": "b", "parents": ["c"]}, {"id": "c", "parents": ["a"]}])
    with pytest.raises(OntologyError, match="cycle in type hierarchy: a -> b -> c -> a"):
        load_ontology(d)


@pytest.mark.parametrize("bad, msg", [
    (doc([{"id": "a", "parents": ["zz"]}]), "parent 'zz'"),
    (doc([{"id": "a"}, {"id": "a"}]), "duplicate type id"),
    (doc([{"id": "a"}], [{"id": "p", "domain": ["zz"]}]), "domain type 'zz'"),
    (doc([{"id": "a"}], [{"id": "p", "range": []}]), "explicitly empty"),
    (doc([{"id": "a"}], [{"id": "p", "allowed_qualifiers": ["q"]}]), "does not resolve"),
    (doc([{"id": "a"}], [{"id": "p", "allowed_qualifiers": ["q"]}, {"id": "q"}]), "not a qualifier predicate"),
])
def test_malformed_documents_are_rejected(bad, msg):
    with pytest.raises(OntologyError, match=msg):
        load_ontology(bad)


def test_absent_constraint_keys_mean_unconstrained():
    o = load_ontology(doc([{"id": "a"}], [{"id": "p"}]))
    assert o.predicate("p").domain is None and o.predicate("p").range is None


def test_resolve_by_label_and_alias(library_ontology):
    assert library_ontology.resolve_type("Person") == "human"
    assert library_ontology.resolve_type("written work") == "written_work"
    assert library_ontology.resolve_predicate("Educated At") == "educated_at"
    assert library_ontology.resolve_type("nothing") is None


def test_document_roundtrip_keeps_hash(library_ontology, tmp_path):
    p = tmp_path / "o.json"
    p.write_text(json.dumps(library_ontology.to_document()))
    again = read_ontology(p)
    assert again.content_hash == library_ontology.content_hash


def test_read_ontology_reports_bad_json(tmp_path):
    p = tmp_path / "o.json"
    p.write_text("{\n  nope")
    with pytest.raises(OntologyError, match="line 2"):
        read_ontology(p)


@st.composite
def dags(draw):
    n = draw(st.integers(1, 12))
    types = []
    for i in range(n):
        parents = draw(st.sets(st.integers(0, i - 1), max_size=3)) if i else set()
        types.append({"id": f"t{i}", "parents": [f"t{j}" for j in parents]})
    return types


def _reachable(types, start):
    parents = {t["id"]: t["parents"] for t in types}
    seen, stack = set(), [start]
    while stack:
        x = stack.pop()
        if x not in seen:
            seen.add(x)
            stack.extend(parents[x])
    return seen


@settings(max_examples=80, deadline=None)
@given(dags())
def test_closure_matches_graph_reachability(types):
    o = load_ontology(doc(types))
    for t in types:
        assert o.ancestors(t["id"]) == _reachable(types, t["id"])
    for t in o.types:
        for u in o.ancestors(t):
            assert o.ancestors(u) <= o.ancestors(t)


@settings(max_examples=60, deadline=None)
@given(dags(), st.data())
def test_types_satisfy_is_monotone_in_types(types, data):
    o = load_ontology(doc(types))
    ids = sorted(o.types)
    some = data.draw(st.sets(st.sampled_from(ids)))
    more = some | data.draw(st.sets(st.sampled_from(ids)))
    constraint = data.draw(st.sets(st.sampled_from(ids), min_size=1))
    if o.types_satisfy(some, constraint):
        assert o.types_satisfy(more, constraint)
