"""How the candidate band width drives canonicalization calls.

For each beta, canonicalize the same random type labels and report how many
needed a model call (multi-member band) and the mean band size. Uses the
trigram embedder and a stub chat that picks the top candidate, so it needs no
scripted replies.

    python3 scripts/band_sweep.py --ontology tests/fixtures/toy/ontology.json
"""
import argparse
import random

from oakmend.canon import Canonicalizer, candidate_band
from oakmend.llmgate import ChatClient, EmbeddingClient, TokenLedger, TrigramEmbedder
from oakmend.ontology import read_ontology

SYLLABLES = ["per", "son", "hu", "man", "work", "book", "writ", "ten", "org", "an", "iza", "tion", "date",
             "uni", "ver", "sity", "place", "loc", "city", "award", "film", "club", "team", "song"]


class TopPick:
    def __init__(self):
        self.answer = ""

    def complete(self, stage, prompt):
        return self.answer, None, None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ontology", required=True)
    ap.add_argument("--labels", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.02, 0.05, 0.1, 0.2, 0.4])
    args = ap.parse_args()

    ontology = read_ontology(args.ontology)
    rnd = random.Random(args.seed)
    labels = sorted({" ".join("".join(rnd.choices(SYLLABLES, k=rnd.randint(1, 3)))
                              for _ in range(rnd.randint(1, 2))) for _ in range(args.labels)})
    embed = EmbeddingClient(TrigramEmbedder())
    print(f"{len(labels)} labels over {len(ontology.types)} types")
    print(f"{'beta':>6} {'calls':>6} {'mean band':>10}")
    for beta in args.betas:
        backend = TopPick()
        canon = Canonicalizer(ontology, ChatClient(backend, TokenLedger()), embed, beta=beta)
        catalog = canon.catalog("types")
        sizes = []
        for label in labels:
            band = candidate_band(label, catalog, beta)
            sizes.append(len(band.ids))
            backend.answer = band.argmax
            canon.canonicalize_type(label)
        print(f"{beta:>6.2f} {canon.chat.ledger.calls():>6} {sum(sizes) / len(sizes):>10.2f}")


if __name__ == "__main__":
    main()
