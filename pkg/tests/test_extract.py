import json

import pytest

from oakmend.extract import (
    ChunkParseError, OpenGraph, chunk_corpus, dumps_open_graph, extract_corpus, extract_open_kg, loads_open_graph,
    parse_json_payload, parse_open_entry, read_corpus, sniff_literal,
)
from oakmend.kgmodel import Chunk, LiteralKind
from oakmend.llmgate import ChatClient, ScriptedChat
from oakmend.prompts import extraction_example, extraction_prompt

ENTRY = {"triple": ["Alan Turing", "educated at", "Princeton University"], "subject_type": "person",
         "object_type": "university", "qualifiers": [{"pair": ["point in time", "1938"], "object_type": "year"}]}


def test_chunking_splits_on_blank_lines():
    chunks = chunk_corpus([("d", "First para.\n\n\n  \nSecond\npara.\r\n\r\nThird."), {"doc_id": "e", "text": "  "}])
    assert [c.id for c in chunks] == ["d#0", "d#1", "d#2"]
    assert chunks[1].text == "Second\npara."


def test_read_corpus_jsonl_and_directory(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"doc_id": 1, "text": "a"}\n\n{"doc_id": "b", "text": "c"}\n')
    assert read_corpus(p) == [{"doc_id": "1", "text": "a"}, {"doc_id": "b", "text": "c"}]
    p.write_text('{"doc_id": 1}\n')
    with pytest.raises(ValueError, match="line 1"):
        read_corpus(p)
    d = tmp_path / "docs"
    d.mkdir()
    (d / "z.txt").write_text("zz")
    (d / "a.txt").write_text("aa")
    assert [x["doc_id"] for x in read_corpus(d)] == ["a", "z"]


@pytest.mark.parametrize("reply", [
    '[{"a": 1}]',
    '```json\n[{"a": 1}]\n```',
    'Here you go:\n[{"a": 1}]\nThanks.',
])
def test_json_payload_tolerates_wrapping(reply):
    assert parse_json_payload(reply) == [{"a": 1}]


def test_json_payload_rejects_prose():
    with pytest.raises(ValueError):
        parse_json_payload("I could not find anything.")


def test_entry_shape_checks():
    t = parse_open_entry(ENTRY, "d#0")
    assert t.subject_label == "Alan Turing" and t.qualifiers[0].object_label == "1938"
    assert t.provenance == "d#0"
    assert parse_open_entry({**ENTRY, "triple": ["a", "b"]}, "x") is None
    assert parse_open_entry({**ENTRY, "subject_type": ""}, "x") is None
    assert parse_open_entry({**ENTRY, "qualifiers": [{"pair": ["p"], "object_type": "t"}]}, "x") is None
    assert parse_open_entry("not a dict", "x") is None
    # numbers are accepted and stringified
    assert parse_open_entry({**ENTRY, "triple": ["a", "b", 1938]}, "x").object_label == "1938"


def test_extraction_prompt_carries_example_and_text():
    p = extraction_prompt("Some text here.")
    assert extraction_example() in p
    assert p.rstrip().endswith("Some text here.")
    json.loads(extraction_example().split("### Output\n", 1)[1])


def test_malformed_entries_are_dropped_individually():
    script = ScriptedChat().on("extract", "Turing text", [ENTRY, {"triple": "bad"}, ENTRY])
    got = extract_open_kg(Chunk("d", 0, "Turing text"), ChatClient(script))
    assert len(got) == 2


def test_unparseable_reply_is_retried_once_then_fails():
    script = ScriptedChat().on("extract", "junk text", "sorry, no JSON")
    client = ChatClient(script)
    with pytest.raises(ChunkParseError, match="d#3"):
        extract_open_kg(Chunk("d", 3, "junk text"), client)
    assert client.ledger.calls("extract") == 2


def test_corpus_extraction_records_failed_chunks():
    script = ScriptedChat().on("extract", "good", [ENTRY]).on("extract", "bad", "nope")
    chunks = [Chunk("d", 0, "good"), Chunk("d", 1, "bad")]
    for par in (1, 3):
        g, failures = extract_corpus(chunks, ChatClient(script), parallelism=par)
        assert list(g.chunks) == ["d#0", "d#1"] and g.chunks["d#1"] == []
        assert [f["chunk"] for f in failures] == ["d#1"]


def test_open_graph_indexes_and_roundtrip():
    t = parse_open_entry(ENTRY, "d#0")
    g = OpenGraph.build({"d#0": [t], "d#1": [t]})
    assert g.type_entities["person"] == ["Alan Turing"]
    assert g.type_entities["year"] == ["1938"]
    assert g.predicate_pairs["educated at"] == [("Alan Turing", "Princeton University")]
    assert g.type_first_chunk["university"] == "d#0"
    assert g.qualifier_predicates == ["point in time"]
    again = loads_open_graph(dumps_open_graph(g))
    assert again == g


@pytest.mark.parametrize("label, tlabel, kind", [
    ("1938", "", LiteralKind.QUANTITY),
    ("1938", "year", LiteralKind.DATE),
    ("23 June 1912", "", LiteralKind.DATE),
    ("June 23, 1912", "", LiteralKind.DATE),
    ("1912-06-23", "", LiteralKind.DATE),
    ("3,000", "", LiteralKind.QUANTITY),
    ("42%", "", LiteralKind.QUANTITY),
    ("hello", "string", LiteralKind.STRING),
    ("Alan Turing", "person", None),
    ("Bletchley Park", "", None),
])
def test_literal_sniffing(label, tlabel, kind):
    assert sniff_literal(label, tlabel) == kind
