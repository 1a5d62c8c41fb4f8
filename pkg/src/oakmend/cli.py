"""Command-line entry point: ``oakmend <stage> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .kgmodel import KGError
from .llmgate import BackendError
from .ontology import OntologyError
from .pipeline import (
    ConfigError, ManifestMismatch, PipelineConfig, PrerequisiteError, Run, RunLock, RunManifest, RunLocked, format_stats,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
COMMANDS = ("extract", "canon", "dedup", "validate", "mend", "stats", "bgp-gen", "bgp-eval", "pipeline")

log = logging.getLogger("oakmend")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with pipeline config fields")
    common.add_argument("--ontology", help="ontology JSON")
    common.add_argument("--in", dest="inp", help="corpus (extract, pipeline) or BGP file (bgp-eval)")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--beta", type=float, help="candidate band width")
    common.add_argument("--seed", type=int)
    common.add_argument("--parallelism", type=int)
    common.add_argument("--mock", help="directory with scripted chat.json (and optional embeddings.json)")
    common.add_argument("--dedup-threshold", type=float, dest="dedup_threshold")
    common.add_argument("--context-cap", type=int, dest="context_cap")
    common.add_argument("--mend-rounds", type=int, dest="mend_rounds")
    common.add_argument("--force", action="store_true", help="redo a completed stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="oakmend", description="Ontology-grounded KG extraction and repair.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "extract": "open extraction over the corpus",
        "canon": "map open labels onto the ontology",
        "dedup": "merge duplicate entities",
        "validate": "check the latest graph against the ontology",
        "mend": "repair violations",
        "stats": "summarize validity and token spend",
        "bgp-gen": "generate artificial graph patterns from the ontology",
        "bgp-eval": "count pattern matches over the latest graph",
        "pipeline": "run extract through stats",
    }
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common], help=helps[cmd])
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.from_file(args.config)
    else:
        # a run directory remembers the settings it was started with
        cfg = PipelineConfig()
        prior = RunManifest.load(Path(args.out)) if args.out else None
        if prior is not None and prior.config:
            cfg = PipelineConfig.from_dict(prior.config)
    if args.ontology:
        cfg.ontology = args.ontology
    if args.inp:
        if args.command == "bgp-eval":
            cfg.bgp_file = args.inp
        else:
            cfg.corpus = args.inp
    if args.out:
        cfg.out_dir = args.out
    for name in ("beta", "seed", "parallelism", "mend_rounds", "dedup_threshold", "context_cap"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.mock:
        cfg.mock_dir = args.mock
        cfg.mode = "mock"
    if not cfg.ontology:
        raise ConfigError("no ontology given (use --ontology or the config's ontology field)")
    return cfg.validate()


def _dispatch(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    with RunLock(Path(cfg.out_dir)):
        run = Run(cfg)
        if args.command == "pipeline":
            run.run_pipeline(force=args.force)
            print(format_stats(run.stats()))
            return
        stage = args.command
        if stage == "validate" and run.manifest.done("mend"):
            stage = "validate-post"
        got = run.run_stage(stage, force=args.force)
        if got is None:
            print(f"{stage}: already complete, nothing to do (use --force to redo)")
            got = run.manifest.stages[stage]["artifacts"]
        if stage == "stats":
            print(format_stats(run.stats()))
        elif stage.startswith("validate"):
            doc = json.loads(run.read_artifact(stage, "report"))
            print(json.dumps(doc["report"], indent=2, sort_keys=True))
        else:
            for name, path in got.items():
                print(f"{stage}: {name} -> {Path(cfg.out_dir) / path}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"oakmend: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _dispatch(args, cfg)
    except BackendError as exc:
        print(f"oakmend: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (PrerequisiteError, ManifestMismatch, RunLocked, OntologyError, KGError, ConfigError,
            OSError, ValueError) as exc:
        print(f"oakmend: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
