import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oakmend.kgmodel import KGError, KnowledgeGraph
from oakmend.ontology import load_ontology
from oakmend.validate import ViolationKind, validate_graph, validate_qualifier, validate_triple

from .helpers import DATE, build_kg

D, R = ViolationKind.DOMAIN, ViolationKind.RANGE


def kinds(vs):
    return [v.kind for v in vs]


def one(ontology, entities, triple):
    kg, ids = build_kg(ontology, entities, [triple])
    return kg, kg.triples[kg.triple_ids()[0]]


def test_turing_is_clean(library_ontology):
    kg, t = one(library_ontology, {"Alan Turing": ["mathematician"], "Princeton": ["university"]},
                ("Alan Turing", "educated_at", "Princeton"))
    assert validate_triple(library_ontology, kg, t) == []


def test_reversed_author_violates_both(library_ontology):
    kg, t = one(library_ontology, {"G. Orwell": ["human"], "Animal Farm": ["book"]},
                ("G. Orwell", "author", "Animal Farm"))
    assert kinds(validate_triple(library_ontology, kg, t)) == [D, R]


def test_wrong_predicate_violates_range(library_ontology):
    kg, t = one(library_ontology, {"Animal Farm": ["book"], "Penguin Books": ["organization"]},
                ("Animal Farm", "distribution_format", "Penguin Books"))
    assert kinds(validate_triple(library_ontology, kg, t)) == [R]


def test_too_general_subject_violates_domain(library_ontology):
    kg, t = one(library_ontology, {"Animal Farm": ["written_work"], "G. Orwell": ["human"]},
                ("Animal Farm", "author", "G. Orwell"))
    vs = validate_triple(library_ontology, kg, t)
    assert kinds(vs) == [D]
    assert vs[0].explanation == "subject types {written work} do not satisfy domain {book} of predicate author"


def test_qualifier_examples(library_ontology):
    kg, ids = build_kg(library_ontology,
                       {"Alan Turing": ["mathematician"], "Princeton": ["university"], "1938": (["date"], DATE),
                        "red": ["color"]},
                       [("Alan Turing", "educated_at", "Princeton", [("point_in_time", "1938"), ("color", "red")])])
    t = kg.triples[kg.triple_ids()[0]]
    assert validate_qualifier(library_ontology, kg, t, t.qualifiers[0]) == []
    vs = validate_qualifier(library_ontology, kg, t, t.qualifiers[1])
    assert kinds(vs) == [ViolationKind.QUALIFIER_NOT_ALLOWED] and vs[0].qualifier_index == 1


def test_disallowed_and_out_of_range_reports_both(library_ontology):
    kg, ids = build_kg(library_ontology, {"Alan Turing": ["human"], "Princeton": ["university"], "London": ["city"]},
                       [("Alan Turing", "educated_at", "Princeton", [("color", "London")])])
    t = kg.triples[kg.triple_ids()[0]]
    assert kinds(validate_qualifier(library_ontology, kg, t, t.qualifiers[0])) == [
        ViolationKind.QUALIFIER_NOT_ALLOWED, ViolationKind.QUALIFIER_RANGE]


def test_absent_range_admits_anything():
    o = load_ontology({"types": [{"id": "a"}], "predicates": [
        {"id": "p", "allowed_qualifiers": ["q"]}, {"id": "q", "is_qualifier": True}]})
    kg, ids = build_kg(o, {"x": ["a"], "y": [], "z": []}, [("x", "p", "y", [("q", "z")])])
    report, vs = validate_graph(o, kg)
    assert vs == [] and report.valid_qualifiers == 1


def test_dangling_reference_is_an_error(library_ontology):
    kg, t = one(library_ontology, {"A": ["human"], "B": ["university"]}, ("A", "educated_at", "B"))
    del kg.entities[t.object]
    with pytest.raises(KGError, match="dangling"):
        validate_triple(library_ontology, kg, t)


def test_empty_graph_report(library_ontology):
    report, vs = validate_graph(library_ontology, KnowledgeGraph())
    assert report.total_triples == 0 and report.pct_valid_triples is None
    assert report.to_dict()["pct_valid_qualifiers"] is None
    assert "n/a" in report.to_table()


def test_report_counts(library_ontology):
    kg, ids = build_kg(library_ontology,
                       {"Orwell": ["human"], "Animal Farm": ["book"], "Eton": ["university"],
                        "1945": (["date"], DATE)},
                       [("Animal Farm", "author", "Orwell"), ("Orwell", "educated_at", "Eton"),
                        ("Orwell", "author", "Eton", [("point_in_time", "1945")])])
    report, vs = validate_graph(library_ontology, kg)
    assert report.total_triples == 3 and report.valid_triples == 2
    assert round(report.pct_valid_triples, 1) == 66.7
    assert report.violation_counts == {"DomainViolation": 1, "RangeViolation": 1, "QualifierNotAllowed": 0,
                                       "QualifierRangeViolation": 0}
    # the report is the aggregation of the per-item checks
    per = [v for tid in kg.triple_ids() for v in validate_triple(library_ontology, kg, kg.triples[tid])]
    assert kinds(per) == kinds(vs)
    assert validate_graph(library_ontology, kg)[0].to_json() == report.to_json()


TYPES = ["entity", "human", "mathematician", "organization", "university", "written_work", "book",
         "distribution_medium", "date", "location", "city", "color"]
PREDS = ["author", "educated_at", "publisher", "distribution_format", "publication_date"]
QUALS = ["point_in_time", "start_time", "place_of_publication", "location", "color"]


@st.composite
def random_graphs(draw):
    n = draw(st.integers(2, 6))
    entities = {f"e{i}": draw(st.sets(st.sampled_from(TYPES), max_size=2)) for i in range(n)}
    names = sorted(entities)
    triples = []
    for _ in range(draw(st.integers(1, 6))):
        quals = draw(st.lists(st.tuples(st.sampled_from(QUALS), st.sampled_from(names)), max_size=2))
        triples.append((draw(st.sampled_from(names)), draw(st.sampled_from(PREDS)), draw(st.sampled_from(names)),
                        quals))
    return entities, triples


@settings(max_examples=100, deadline=None)
@given(random_graphs(), st.data())
def test_adding_types_never_adds_violations(library_ontology, graph, data):
    entities, triples = graph
    kg, ids = build_kg(library_ontology, entities, triples)
    _, before = validate_graph(library_ontology, kg)
    eid = ids[data.draw(st.sampled_from(sorted(ids)))]
    kg.add_entity_type(eid, data.draw(st.sampled_from(TYPES)))
    _, after = validate_graph(library_ontology, kg)
    key = lambda v: (v.kind, v.triple_id, v.qualifier_index)
    assert {key(v) for v in after} <= {key(v) for v in before}
