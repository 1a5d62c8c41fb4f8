"""Open-domain extraction: corpus chunking, the extraction LLM call, response
parsing with per-entry shape checks, and literal sniffing."""
from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from .kgmodel import Chunk, LiteralKind
from .llmgate import ChatClient, Stage
from .prompts import extraction_prompt

log = logging.getLogger(__name__)


class ChunkParseError(RuntimeError):
    """The extraction response for a chunk was not valid JSON twice in a row."""

    def __init__(self, chunk_id: str, msg: str):
        super().__init__(f"chunk {chunk_id}: {msg}")
        self.chunk_id = chunk_id


@dataclass
class OpenQualifier:
    predicate_label: str
    object_label: str
    object_type_label: str


@dataclass
class OpenTriple:
    subject_label: str
    predicate_label: str
    object_label: str
    subject_type_label: str
    object_type_label: str
    qualifiers: list[OpenQualifier] = field(default_factory=list)
    provenance: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OpenTriple":
        quals = [OpenQualifier(**q) for q in d.get("qualifiers", [])]
        return cls(d["subject_label"], d["predicate_label"], d["object_label"], d["subject_type_label"],
                   d["object_type_label"], quals, d.get("provenance", ""))


@dataclass
class OpenGraph:
    """Open triples grouped by chunk, with the label indexes canonicalization needs.

    ``type_entities`` maps an open type label to the entity labels that carried
    it, and ``predicate_pairs`` maps an open predicate label to its
    (subject, object) label pairs, both in first-seen order.
    """
    chunks: dict[str, list[OpenTriple]] = field(default_factory=dict)
    type_entities: dict[str, list[str]] = field(default_factory=dict)
    predicate_pairs: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    type_first_chunk: dict[str, str] = field(default_factory=dict)
    predicate_first_chunk: dict[str, str] = field(default_factory=dict)
    qualifier_predicates: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, per_chunk: dict[str, list[OpenTriple]]) -> "OpenGraph":
        g = cls(chunks=dict(per_chunk))
        types: dict[str, dict[str, None]] = defaultdict(dict)
        preds: dict[str, dict[tuple[str, str], None]] = defaultdict(dict)
        quals: dict[str, None] = {}
        for cid, triples in per_chunk.items():
            for t in triples:
                for label, tlabel in [(t.subject_label, t.subject_type_label), (t.object_label, t.object_type_label),
                                      *((q.object_label, q.object_type_label) for q in t.qualifiers)]:
                    types[tlabel][label] = None
                    g.type_first_chunk.setdefault(tlabel, cid)
                preds[t.predicate_label][(t.subject_label, t.object_label)] = None
                g.predicate_first_chunk.setdefault(t.predicate_label, cid)
                for q in t.qualifiers:
                    quals[q.predicate_label] = None
        g.type_entities = {k: list(v) for k, v in types.items()}
        g.predicate_pairs = {k: list(v) for k, v in preds.items()}
        g.qualifier_predicates = list(quals)
        return g

    def all_triples(self) -> list[OpenTriple]:
        return [t for ts in self.chunks.values() for t in ts]


# -- corpus -----------------------------------------------------------------

_BLANK = re.compile(r"\n\s*\n")


def chunk_corpus(documents: Iterable) -> list[Chunk]:
    """Split each document into paragraph chunks on blank lines.

    `documents` holds ``(doc_id, text)`` pairs or ``{"doc_id", "text"}`` dicts.
    Empty paragraphs are dropped; chunk indexes are contiguous per document.
    """
    chunks = []
    for doc in documents:
        if isinstance(doc, dict):
            doc_id, text = doc["doc_id"], doc["text"]
        else:
            doc_id, text = doc
        paras = [p.strip() for p in _BLANK.split(text.replace("\r\n", "\n"))]
        for i, p in enumerate(x for x in paras if x):
            chunks.append(Chunk(str(doc_id), i, p))
    return chunks


def read_corpus(path: str | Path) -> list[dict]:
    """JSON Lines of ``{"doc_id", "text"}`` or a directory of plain-text files."""
    path = Path(path)
    if path.is_dir():
        return [{"doc_id": p.stem, "text": p.read_text(encoding="utf-8")}
                for p in sorted(path.iterdir()) if p.is_file() and not p.name.startswith(".")]
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append({"doc_id": str(rec["doc_id"]), "text": rec["text"]})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad corpus record ({exc})") from None
    return docs


# -- response parsing -------------------------------------------------------

_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def parse_json_payload(text: str) -> Any:
    """Parse a JSON value from a model reply, tolerating code fences and
    chatter around a single top-level list or object."""
    s = _FENCE.sub("", text.strip()).strip()
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        pass
    for open_, close in (("[", "]"), ("{", "}")):
        i, j = s.find(open_), s.rfind(close)
        if 0 <= i < j:
            try:
                return json.loads(s[i:j + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in response")


def _nonempty_str(x) -> bool:
    return isinstance(x, (str, int, float)) and not isinstance(x, bool) and str(x).strip() != ""


def _clean(x) -> str:
    return " ".join(str(x).split())


def parse_open_entry(entry: Any, provenance: str) -> Optional[OpenTriple]:
    """Shape-check one extracted entry; None if it is malformed."""
    if not isinstance(entry, dict):
        return None
    triple = entry.get("triple")
    if not (isinstance(triple, list) and len(triple) == 3 and all(_nonempty_str(x) for x in triple)):
        return None
    st, ot = entry.get("subject_type"), entry.get("object_type")
    if not (_nonempty_str(st) and _nonempty_str(ot)):
        return None
    quals = []
    raw_q = entry.get("qualifiers") or []
    if not isinstance(raw_q, list):
        return None
    for q in raw_q:
        pair = q.get("pair") if isinstance(q, dict) else None
        qt = q.get("object_type") if isinstance(q, dict) else None
        if not (isinstance(pair, list) and len(pair) == 2 and all(_nonempty_str(x) for x in pair) and _nonempty_str(qt)):
            # a bad qualifier sinks the whole entry: it is part of the same statement
            return None
        quals.append(OpenQualifier(_clean(pair[0]), _clean(pair[1]), _clean(qt)))
    return OpenTriple(_clean(triple[0]), _clean(triple[1]), _clean(triple[2]), _clean(st), _clean(ot), quals,
                      provenance)


def extract_open_kg(chunk: Chunk, chat: ChatClient) -> list[OpenTriple]:
    """Run the extraction prompt on one chunk.

    Malformed entries are dropped individually. A reply that is not a JSON
    list is retried once with the same prompt; a second failure raises
    ChunkParseError.
    """
    prompt = extraction_prompt(chunk.text)
    payload = None
    for attempt in range(2):
        reply = chat.chat(Stage.EXTRACT, prompt)
        try:
            payload = parse_json_payload(reply)
        except ValueError:
            payload = None
        if isinstance(payload, list):
            break
        log.warning("chunk %s: extraction reply is not a JSON list (attempt %d)", chunk.id, attempt + 1)
        payload = None
    if payload is None:
        raise ChunkParseError(chunk.id, "extraction reply not parseable after retry")
    out = []
    for i, entry in enumerate(payload):
        t = parse_open_entry(entry, chunk.id)
        if t is None:
            log.warning("chunk %s: dropping malformed entry %d", chunk.id, i)
            continue
        out.append(t)
    return out


def extract_corpus(chunks: list[Chunk], chat: ChatClient, parallelism: int = 1
                   ) -> tuple[OpenGraph, list[dict]]:
    """Extract every chunk, merging results in chunk order. Returns the open
    graph and a list of failure records for chunks that were skipped."""

    def work(chunk: Chunk):
        try:
            return extract_open_kg(chunk, chat), None
        except ChunkParseError as exc:
            return [], {"stage": "extract", "chunk": chunk.id, "error": str(exc)}

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    per_chunk = {c.id: r for c, (r, _) in zip(chunks, results)}
    failures = [f for _, f in results if f]
    return OpenGraph.build(per_chunk), failures


# -- literals -----------------------------------------------------------------

_MONTHS = ("january|february|march|april|may|june|july|august|september|october|november|december|"
           "jan|feb|mar|apr|jun|jul|aug|sep|sept|oct|nov|dec")
_DATE_PATTERNS = [
    re.compile(r"^\d{4}-\d{2}-\d{2}(t[\d:.]+z?)?$"),
    re.compile(r"^\d{4}-\d{2}$"),
    re.compile(r"^\d{1,2}[/.]\d{1,2}[/.]\d{2,4}$"),
    re.compile(rf"^\d{{1,2}}(st|nd|rd|th)? ({_MONTHS})\.?,? \d{{1,4}}$"),
    re.compile(rf"^({_MONTHS})\.? \d{{1,2}}(st|nd|rd|th)?,? \d{{1,4}}$"),
    re.compile(rf"^({_MONTHS})\.?,? \d{{3,4}}$"),
]
_NUMBER = re.compile(r"^[-+]?(\d{1,3}(,\d{3})+|\d+)(\.\d+)?([eE][-+]?\d+)?%?$")
_DATE_TYPE = re.compile(r"\b(date|year|time|decade|century|datetime)s?\b")
_QUANTITY_TYPE = re.compile(r"\b(number|quantity|amount|count|integer|numeric value)s?\b")
_STRING_TYPE = re.compile(r"\b(string|literal)s?\b")


def sniff_literal(label: str, type_label: str = "") -> Optional[LiteralKind]:
    """Guess whether an extracted entity is a value rather than a named thing."""
    s = " ".join(label.casefold().split())
    t = type_label.casefold()
    if _DATE_TYPE.search(t):
        return LiteralKind.DATE
    if _QUANTITY_TYPE.search(t):
        return LiteralKind.QUANTITY
    if _STRING_TYPE.search(t):
        return LiteralKind.STRING
    if any(p.match(s) for p in _DATE_PATTERNS):
        return LiteralKind.DATE
    if _NUMBER.match(s):
        return LiteralKind.QUANTITY
    return None


# -- persistence of the open graph -------------------------------------------

def dumps_open_graph(g: OpenGraph) -> str:
    lines = []
    for cid, triples in g.chunks.items():
        lines.append(json.dumps({"chunk": cid, "triples": [t.to_dict() for t in triples]},
                                sort_keys=True, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")


def loads_open_graph(text: str) -> OpenGraph:
    per_chunk = {}
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            per_chunk[rec["chunk"]] = [OpenTriple.from_dict(t) for t in rec["triples"]]
    return OpenGraph.build(per_chunk)
