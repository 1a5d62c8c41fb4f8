"""Ontology-grounded knowledge-graph extraction with symbolic validation and
model-assisted repair, plus a graph-pattern benchmark."""

__version__ = "0.1.0"
