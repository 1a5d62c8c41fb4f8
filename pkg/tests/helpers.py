from oakmend.kgmodel import KnowledgeGraph, LiteralKind, Qualifier

DATE = LiteralKind.DATE


def build_kg(ontology, entities, triples):
    """entities: {label: types or (types, literal kind)}; triples: (s, p, o[, quals])."""
    kg = KnowledgeGraph(ontology_hash=ontology.content_hash if ontology else None)
    ids = {}
    for label, spec in entities.items():
        types, kind = (spec, None) if not isinstance(spec, tuple) else spec
        ids[label] = kg.add_entity(label, types, literal_kind=kind).id
    for t in triples:
        s, p, o = t[:3]
        quals = [Qualifier(qp, ids[qo]) for qp, qo in (t[3] if len(t) > 3 else [])]
        kg.add_triple(ids[s], p, ids[o], quals, "doc#0")
    return kg, ids

