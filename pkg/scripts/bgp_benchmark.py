"""Per-template BGP metrics for a finished run, before and after mending.

    python3 scripts/bgp_benchmark.py --run /tmp/toyrun --ontology tests/fixtures/toy/ontology.json
"""
import argparse
from pathlib import Path

from oakmend.bgpbench import TEMPLATES, TripleIndex, build_ontology_kg, generate_bgps, h_index, i_k_index, match_count
from oakmend.kgmodel import load_kg
from oakmend.ontology import read_ontology


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="run directory holding dedup_kg.jsonl and mended_kg.jsonl")
    ap.add_argument("--ontology", required=True)
    ap.add_argument("--cap", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ontology = read_ontology(args.ontology)
    okg = build_ontology_kg(ontology)
    run = Path(args.run)
    indexes = {name: TripleIndex.from_kg(load_kg((run / f"{name}_kg.jsonl").read_bytes()), ontology)
               for name in ("dedup", "mended")}

    print(f"{'template':<8} {'bgps':>5}  {'h pre':>5} {'h post':>6}  {'i10 pre':>7} {'i10 post':>8}  {'matches +':>9}")
    for tag in TEMPLATES:
        bgps = generate_bgps(okg, tag, cap=args.cap, seed=args.seed)
        pre = [match_count(indexes["dedup"], b) for b in bgps]
        post = [match_count(indexes["mended"], b) for b in bgps]
        print(f"{tag:<8} {len(bgps):>5}  {h_index(pre):>5} {h_index(post):>6}  {i_k_index(pre, 10):>7} "
              f"{i_k_index(post, 10):>8}  {sum(post) - sum(pre):>9}")


if __name__ == "__main__":
    main()
