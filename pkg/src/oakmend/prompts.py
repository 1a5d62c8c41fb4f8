"""Prompt templates for every LLM stage, and builders that fill them in.

Builders are pure functions of their inputs so prompts are bit-stable and
scripted mocks can key on them.
"""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

EXAMPLE_ASSET = "extraction_example_v1.json"

EXTRACT_SYSTEM = """\
## Task Description
Your task is to extract a Wikidata-like knowledge graph from text. A knowledge graph consists of subject-predicate-object triples where:
- subject and object: Named entities or concepts that describe groups of people, events, or any abstract objects.
- predicate: A predicate (or relation type) that connects the subject and object.

Additionally, some triples may have qualifiers providing contextual information about a triple (e.g., date, place, or other attributes).
Each qualifier only exists when linked to a triple and consists of a predicate-object pair.

## Inputs
You will receive the text.

## Output Format
Extract triples and qualifiers in **JSON** as a list of dictionaries, where each dictionary contains:
- "triple": A list of three elements: subject, predicate, and object
- "subject_type": The type of the subject
- "object_type": The type of the object
- "qualifiers": An optional list of dictionaries, where each dictionary contains:
    - "pair": A list of two elements: qualifier predicate, and qualifier object
    - "object_type": The type of the qualifier object

## Example
"""

CANON_TYPE_SYSTEM = """\
## Task Description
Your task is to disambiguate an entity type for one or more entities extracted from text.

## Inputs
You will receive a text, a list of extracted entities, an extracted entity type, and a list of candidate types.
Return a single type for all the entities. No additional text.
"""

CANON_PRED_SYSTEM = """\
## Task Description
Your task is to disambiguate a predicate indicating the relationship type between pairs of entities extracted from text. Assume the predicate direction is not important.

## Inputs
You will receive a text, a list of extracted entity pairs, the extracted predicate, and a list of candidate predicates.
Return a single predicate for all the entity pairs. No additional text.
"""

DEDUP_SYSTEM = """\
## Task Description
Find duplicates for a given entity, and an entity alias that best represents the duplicates.
Duplicates are those that are the same in meaning, such as with variation in tense, plural form, stem form, case, abbreviation, shorthand.

## Inputs
You will receive an entity and a list of candidate duplicate entities.

## Output Format
Return duplicates and the alias in **JSON** as a dictionary containing:
- "duplicates": A list of duplicate entities taken from the candidates list
- "alias": Best entity name to represent the duplicates

If there are no duplicates, then return the empty dictionary {}.
"""

MEND_TRIPLE_SYSTEM = """\
## Task Description
You are a knowledge graph expert. Your task is to correct an invalid subject-predicate-object (SPO) triple so that it satisfies ontology constraints, while still reflecting information present in the source text.

## Inputs
- Source text
- The invalid triple (subject, predicate, object)
- The domain and range constraints of the predicate
- A list of candidate replacement predicates
- The reasons why the triple is invalid

## Allowed Actions (applied in sequence)
- "swap": swap subject and object
- "add_subject_type": add type to subject (to satisfy domain)
- "add_object_type": add type to object (to satisfy range)
- "replace_predicate": replace predicate with a candidate

## Rules
- Added types must be plausible given the text
- Only use candidates for replace_predicate
- Actions are applied in order, each modifying the result of the previous one
- Choose the sequence of actions that produces a triple consistent with the ontology constraints and grounded in the source text. If no such sequence exists, return an empty list []

## Output
Return only a **JSON** list of [action, value] pairs, where action is one of swap, add_subject_type, add_object_type, replace_predicate, and value is the new type or predicate string (or null for swap). Return an empty list if no correction is possible.

### Output Examples
- [["replace_predicate", "publication date"]]
- [["swap", null], ["add_object_type", "person"]]
- []
"""

MEND_QUALIFIER_SYSTEM = """\
## Task Description
You are a knowledge graph expert. Your task is to correct a qualifier predicate-object pair associated to a triple so that it satisfies ontology constraints, while still reflecting information present in the source text.

## Inputs
- Source text
- The triple (subject, predicate, object)
- The invalid qualifier (qualifier predicate, qualifier object)
- The range constraint of the qualifier predicate
- A list of candidate replacement qualifier predicates
- The reason why the qualifier is invalid

## Allowed Actions
- "add_object_type": add type to qualifier object (to satisfy range)
- "replace_predicate": replace qualifier predicate with a candidate

## Rules
- Added types must be plausible given the text
- Only use candidates for replace_predicate
- Choose the action that produces a qualifier consistent with the ontology constraints and grounded in the source text. If no action exists, return an empty list []

## Output
Return only a **JSON** list [action, value], where action is one of add_object_type, replace_predicate, and value is the new type or predicate string. Return an empty list if no correction is possible.

### Output Examples
- ["replace_predicate", "doctoral advisor"]
- ["add_object_type", "person"]
- []
"""


@lru_cache(maxsize=None)
def extraction_example() -> str:
    """The fixed in-context example, rendered as it appears in the prompt."""
    raw = resources.files("oakmend.assets").joinpath(EXAMPLE_ASSET).read_text(encoding="utf-8")
    ex = json.loads(raw)
    output = json.dumps(ex["output"], indent=2, ensure_ascii=False)
    return f"Text:\n{ex['text']}\n\n### Output\n{output}\n"


def _bullets(items) -> str:
    items = list(items)
    if not items:
        return "- (none)"
    return "\n".join(f"- {x}" for x in items)


def extraction_prompt(text: str) -> str:
    return f"{EXTRACT_SYSTEM}{extraction_example()}\n## Text\n{text}\n"


def canon_type_prompt(text: str, entities: list[str], open_type: str, candidates: list[str]) -> str:
    return (f"{CANON_TYPE_SYSTEM}\n## Text\n{text}\n\n## Extracted entities\n{_bullets(entities)}\n\n"
            f"## Extracted entity type\n{open_type}\n\n## Candidate types\n{_bullets(candidates)}\n")


def canon_pred_prompt(text: str, pairs: list[tuple[str, str]], open_pred: str, candidates: list[str]) -> str:
    pair_lines = [f"({s}, {o})" for s, o in pairs]
    return (f"{CANON_PRED_SYSTEM}\n## Text\n{text}\n\n## Extracted entity pairs\n{_bullets(pair_lines)}\n\n"
            f"## Extracted predicate\n{open_pred}\n\n## Candidate predicates\n{_bullets(candidates)}\n")


def dedup_prompt(entity: str, candidates: list[str]) -> str:
    return f"{DEDUP_SYSTEM}\n## Entity\n{entity}\n\n## Candidate duplicate entities\n{_bullets(candidates)}\n"


def mend_triple_prompt(text: str, triple: tuple[str, str, str], domain: list[str] | None,
                       range_: list[str] | None, candidates: list[str], reasons: list[str]) -> str:
    dom = ", ".join(domain) if domain is not None else "(unconstrained)"
    rng = ", ".join(range_) if range_ is not None else "(unconstrained)"
    return (f"{MEND_TRIPLE_SYSTEM}\n## Source text\n{text}\n\n"
            f"## Invalid triple\n({triple[0]}, {triple[1]}, {triple[2]})\n\n"
            f"## Constraints of predicate {triple[1]}\n- domain: {dom}\n- range: {rng}\n\n"
            f"## Candidate replacement predicates\n{_bullets(candidates)}\n\n"
            f"## Reasons\n{_bullets(reasons)}\n")


def mend_qualifier_prompt(text: str, triple: tuple[str, str, str], qualifier: tuple[str, str],
                          range_: list[str] | None, candidates: list[str], reasons: list[str]) -> str:
    rng = ", ".join(range_) if range_ is not None else "(unconstrained)"
    return (f"{MEND_QUALIFIER_SYSTEM}\n## Source text\n{text}\n\n"
            f"## Triple\n({triple[0]}, {triple[1]}, {triple[2]})\n\n"
            f"## Invalid qualifier\n({qualifier[0]}, {qualifier[1]})\n\n"
            f"## Range of qualifier predicate {qualifier[0]}\n- range: {rng}\n\n"
            f"## Candidate replacement qualifier predicates\n{_bullets(candidates)}\n\n"
            f"## Reasons\n{_bullets(reasons)}\n")
