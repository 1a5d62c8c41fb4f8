"""Run the scripted toy pipeline end to end, then generate and score BGPs.

    python3 scripts/run_toy_pipeline.py --out /tmp/toyrun
"""
import argparse
import json
import time
from pathlib import Path

from oakmend.pipeline import PipelineConfig, format_stats, run_pipeline

TOY = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "toy"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="toyrun")
    ap.add_argument("--parallelism", type=int, default=1)
    ap.add_argument("--force", action="store_true", help="recompute stages already in --out")
    args = ap.parse_args()

    cfg = PipelineConfig(ontology=str(TOY / "ontology.json"), corpus=str(TOY / "corpus.jsonl"), out_dir=args.out,
                         mock_dir=str(TOY / "mock"), parallelism=args.parallelism)
    t0 = time.perf_counter()
    run = run_pipeline(cfg, force=args.force)
    for stage in ("bgp-gen", "bgp-eval"):
        run.run_stage(stage, force=args.force)
    elapsed = time.perf_counter() - t0

    print(format_stats(run.stats()))
    metrics = json.loads((Path(args.out) / "bgp_metrics.json").read_text())
    print(f"bgps {len(metrics['per_bgp'])}  h-index {metrics['h_index']}  i10 {metrics['i10_index']}  "
          f"avg multiplicity {metrics['avg_multiplicity']}")
    print(f"done in {elapsed:.2f} s, artifacts in {args.out}")


if __name__ == "__main__":
    main()
