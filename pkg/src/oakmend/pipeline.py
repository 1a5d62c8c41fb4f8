"""Staged pipeline runs over an output directory.

Every stage reads its inputs from earlier artifacts, writes its own artifacts
atomically and records completion (plus the chat tokens it spent) in
``manifest.json``. A rerun picks up at the first stage not marked done.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import bgpbench
from .canon import Canonicalizer, canonicalize_graph, dedup_entities
from .extract import chunk_corpus, dumps_open_graph, extract_corpus, loads_open_graph, read_corpus
from .kgmodel import KnowledgeGraph, dumps_kg, load_kg
from .llmgate import (
    Backends, ChatClient, EmbeddingClient, HTTPChat, HTTPEmbedder, RecordedEmbedder, RecordingChat, ScriptedChat,
    TokenLedger, TrigramEmbedder, weighted_cost,
)
from .mend import mend_qualifiers, mend_triples
from .ontology import Ontology, read_ontology
from .validate import validate_graph

log = logging.getLogger(__name__)

STAGES = ("extract", "canon", "dedup", "validate", "mend", "validate-post", "stats", "bgp-gen", "bgp-eval")
PIPELINE_ORDER = ("extract", "canon", "dedup", "validate", "mend", "validate-post", "stats")
PREREQUISITES = {
    "extract": (),
    "canon": ("extract",),
    "dedup": ("extract", "canon"),
    "validate": ("extract", "canon"),
    "mend": ("extract", "canon", "dedup"),
    "validate-post": ("extract", "canon", "dedup", "mend"),
    "stats": ("extract", "canon", "validate"),
    "bgp-gen": (),
    "bgp-eval": ("extract", "canon"),
}
MODES = ("mock", "live", "replay")


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} needs stage {missing!r} to have completed first")
        self.stage = stage
        self.missing = missing


class ManifestMismatch(ValueError):
    pass


class RunLocked(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    ontology: str = ""
    corpus: str = ""
    out_dir: str = "run"
    mode: str = "mock"
    mock_dir: Optional[str] = None
    chat_url: Optional[str] = None
    embed_url: Optional[str] = None
    model: str = "default"
    beta: float = 0.05
    dedup_threshold: float = 0.9
    k: int = 10
    mend_rounds: int = 1
    parallelism: int = 1
    seed: int = 0
    context_cap: int = 20
    predicate_floor: float = 0.3
    bgp_templates: list[str] = field(default_factory=lambda: list(bgpbench.TEMPLATES))
    bgp_cap: int = 10_000
    bgp_file: Optional[str] = None

    # fields that do not change any artifact's content
    _UNHASHED = ("out_dir", "parallelism", "mock_dir", "chat_url", "embed_url", "bgp_file")

    def validate(self) -> "PipelineConfig":
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ConfigError(f"dedup_threshold must be in [0, 1], got {self.dedup_threshold}")
        if not -1.0 <= self.predicate_floor <= 1.0:
            raise ConfigError(f"predicate_floor must be in [-1, 1], got {self.predicate_floor}")
        for name in ("k", "mend_rounds", "parallelism", "context_cap", "bgp_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("mock", "replay") and not self.mock_dir:
            raise ConfigError(f"mode {self.mode!r} needs a mock directory")
        unknown = [t for t in self.bgp_templates if t not in bgpbench.TEMPLATES]
        if unknown:
            raise ConfigError(f"unknown BGP templates {unknown}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config fields {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def pinned(self) -> dict:
        """The fields that determine artifact content."""
        return {k: v for k, v in self.to_dict().items() if k not in self._UNHASHED}

    @property
    def hash(self) -> str:
        d = self.pinned()
        # corpus identity is its file name; moving the run tree should not invalidate it
        d["corpus"] = Path(self.corpus).name if self.corpus else ""
        d["ontology"] = Path(self.ontology).name if self.ontology else ""
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- files ------------------------------------------------------------------------

def atomic_write(path: Path, data: str | bytes) -> None:
    """Write to a temp file in the same directory, fsync, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class RunLock:
    """Exclusive ownership of an output directory. A lock left by a dead
    process is taken over."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise RunLocked(f"{self.path.parent} is in use by another run (lock {self.path})") from None
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise RunLocked(f"could not acquire {self.path}")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return True
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# -- manifest ------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    ontology_hash: str
    config: dict = field(default_factory=dict)
    stages: dict[str, dict] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    FILE = "manifest.json"

    def done(self, stage: str) -> bool:
        return bool(self.stages.get(stage, {}).get("done"))

    def artifact(self, stage: str, name: str) -> str:
        return self.stages[stage]["artifacts"][name]

    def mark(self, stage: str, artifacts: dict[str, str], ledger: TokenLedger) -> None:
        self.stages[stage] = {"done": True, "artifacts": dict(sorted(artifacts.items())), "ledger": ledger.to_dict()}

    def invalidate_after(self, stage: str) -> None:
        """Forget every downstream stage when `stage` is redone."""
        drop = {other for other in STAGES if stage in PREREQUISITES[other]}
        if stage in PIPELINE_ORDER:
            drop |= set(PIPELINE_ORDER[PIPELINE_ORDER.index(stage) + 1:])
        if stage in ("extract", "canon", "dedup", "mend", "bgp-gen"):
            drop.add("bgp-eval")
        for other in drop - {stage}:
            self.stages.pop(other, None)

    def ledger(self) -> TokenLedger:
        total = TokenLedger()
        for rec in self.stages.values():
            total.merge(TokenLedger.from_dict(rec.get("ledger", {})))
        return total

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "ontology_hash": self.ontology_hash, "config": self.config,
                "stages": self.stages, "failures": self.failures}

    def save(self, out_dir: Path) -> None:
        atomic_write(Path(out_dir) / self.FILE, _json(self.to_dict()))

    @classmethod
    def load(cls, out_dir: Path) -> Optional["RunManifest"]:
        path = Path(out_dir) / cls.FILE
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(data["config_hash"], data["ontology_hash"], data.get("config", {}), data.get("stages", {}),
                   data.get("failures", []))


# -- backends --------------------------------------------------------------------

def make_backends(config: PipelineConfig, ledger: Optional[TokenLedger] = None) -> Backends:
    ledger = ledger or TokenLedger()
    if config.mode == "mock":
        mock = Path(config.mock_dir)
        chat_path = mock / "chat.json"
        if not chat_path.exists():
            raise ConfigError(f"mock directory {mock} has no chat.json")
        chat = ScriptedChat.from_file(chat_path)
        emb_path = mock / "embeddings.json"
        if emb_path.exists():
            embed = RecordedEmbedder(json.loads(emb_path.read_text(encoding="utf-8")))
        else:
            embed = TrigramEmbedder()
        return Backends(ChatClient(chat, ledger), EmbeddingClient(embed), ledger)
    chat = HTTPChat(config.chat_url, model=config.model)
    embed = HTTPEmbedder(config.embed_url, model=config.model)
    if config.mode == "replay":
        chat = RecordingChat(chat)
    return Backends(ChatClient(chat, ledger), EmbeddingClient(embed), ledger)


def _save_recordings(config: PipelineConfig, backends: Backends) -> None:
    if config.mode != "replay" or not isinstance(backends.chat.backend, RecordingChat):
        return
    mock = Path(config.mock_dir)
    mock.mkdir(parents=True, exist_ok=True)
    backends.chat.backend.save(mock / "chat.json")
    backends.chat.backend.records.clear()
    emb_path = mock / "embeddings.json"
    table = json.loads(emb_path.read_text(encoding="utf-8")) if emb_path.exists() else {}
    table.update(backends.embed.recorded_table())
    atomic_write(emb_path, json.dumps(table, sort_keys=True))


# -- stages -----------------------------------------------------------------------

class Run:
    """One pipeline run bound to an output directory."""

    def __init__(self, config: PipelineConfig, backends: Optional[Backends] = None):
        self.config = config.validate()
        self.out = Path(config.out_dir)
        self.ontology: Ontology = read_ontology(config.ontology)
        self._backends = backends
        self.manifest = self._open_manifest()

    @property
    def backends(self) -> Backends:
        if self._backends is None:
            self._backends = make_backends(self.config)
        return self._backends

    def _open_manifest(self) -> RunManifest:
        m = RunManifest.load(self.out)
        if m is None:
            return RunManifest(self.config.hash, self.ontology.content_hash, self.config.pinned())
        if m.config_hash != self.config.hash:
            raise ManifestMismatch(f"{self.out} was produced with config {m.config_hash}, "
                                   f"current config is {self.config.hash}; use a fresh --out")
        if m.ontology_hash != self.ontology.content_hash:
            raise ManifestMismatch(f"{self.out} was produced against a different ontology")
        return m

    def path(self, name: str) -> Path:
        return self.out / name

    def read_artifact(self, stage: str, name: str) -> str:
        return self.path(self.manifest.artifact(stage, name)).read_text(encoding="utf-8")

    def load_kg(self, stage: str) -> KnowledgeGraph:
        return load_kg(self.read_artifact(stage, "kg"))

    def chunk_texts(self) -> dict[str, str]:
        out = {}
        for line in self.read_artifact("extract", "chunks").splitlines():
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = rec["text"]
        return out

    def latest_kg_stage(self) -> str:
        for stage in ("mend", "dedup", "canon"):
            if self.manifest.done(stage):
                return stage
        raise PrerequisiteError("validate", "canon")

    # each stage returns {artifact name: file name}
    def _extract(self) -> dict[str, str]:
        if not self.config.corpus:
            raise ConfigError("no corpus given (use --in or the config's corpus field)")
        chunks = chunk_corpus(read_corpus(self.config.corpus))
        og, failures = extract_corpus(chunks, self.backends.chat, self.config.parallelism)
        self.manifest.failures = [f for f in self.manifest.failures if f.get("stage") != "extract"] + failures
        chunk_lines = "".join(json.dumps({"id": c.id, "text": c.text}, ensure_ascii=False) + "\n" for c in chunks)
        atomic_write(self.path("chunks.jsonl"), chunk_lines)
        atomic_write(self.path("open_kg.jsonl"), dumps_open_graph(og))
        return {"chunks": "chunks.jsonl", "open_kg": "open_kg.jsonl"}

    def _canon(self) -> dict[str, str]:
        og = loads_open_graph(self.read_artifact("extract", "open_kg"))
        canon = Canonicalizer(self.ontology, self.backends.chat, self.backends.embed, beta=self.config.beta,
                              context_cap=self.config.context_cap, predicate_floor=self.config.predicate_floor)
        res = canonicalize_graph(og, self.chunk_texts(), canon, self.config.parallelism)
        atomic_write(self.path("canon_kg.jsonl"), dumps_kg(res.kg))
        atomic_write(self.path("quarantine.json"), _json(res.quarantine))
        atomic_write(self.path("canon_mapping.json"), _json(res.mapping))
        return {"kg": "canon_kg.jsonl", "quarantine": "quarantine.json", "mapping": "canon_mapping.json"}

    def _dedup(self) -> dict[str, str]:
        kg = self.load_kg("canon")
        kg, report = dedup_entities(kg, self.backends.embed, self.backends.chat, self.config.dedup_threshold)
        atomic_write(self.path("dedup_kg.jsonl"), dumps_kg(kg))
        atomic_write(self.path("dedup_report.json"), _json(dataclasses.asdict(report)))
        return {"kg": "dedup_kg.jsonl", "report": "dedup_report.json"}

    def _validate(self, source: str, name: str) -> dict[str, str]:
        kg = self.load_kg(source)
        report, violations = validate_graph(self.ontology, kg)
        doc = {"source": source, "report": report.to_dict(), "violations": [v.to_dict() for v in violations]}
        atomic_write(self.path(name), _json(doc))
        return {"report": name}

    def _mend(self) -> dict[str, str]:
        kg = self.load_kg("dedup")
        texts = self.chunk_texts()
        report = mend_triples(self.ontology, kg, self.backends.chat, self.backends.embed, texts,
                              k=self.config.k, rounds=self.config.mend_rounds)
        mend_qualifiers(self.ontology, kg, self.backends.chat, self.backends.embed, texts, k=self.config.k,
                        report=report)
        atomic_write(self.path("mended_kg.jsonl"), dumps_kg(kg))
        atomic_write(self.path("mend_report.json"), _json(report.to_dict()))
        return {"kg": "mended_kg.jsonl", "report": "mend_report.json"}

    def _stats(self) -> dict[str, str]:
        summary = self.stats()
        atomic_write(self.path("stats.json"), _json(summary))
        return {"stats": "stats.json"}

    def _bgp_gen(self) -> dict[str, str]:
        okg = bgpbench.build_ontology_kg(self.ontology)
        bgps = []
        for tmpl in self.config.bgp_templates:
            bgps += bgpbench.generate_bgps(okg, tmpl, self.config.bgp_cap, self.config.seed)
        atomic_write(self.path("bgps.txt"), bgpbench.dumps_bgps(bgps))
        return {"bgps": "bgps.txt"}

    def _bgp_eval(self) -> dict[str, str]:
        if self.config.bgp_file:
            bgps = bgpbench.load_bgp_file(self.config.bgp_file, self.ontology)
        elif self.manifest.done("bgp-gen"):
            bgps = bgpbench.load_bgp_file(self.path(self.manifest.artifact("bgp-gen", "bgps")), self.ontology)
        else:
            raise PrerequisiteError("bgp-eval", "bgp-gen")
        source = self.latest_kg_stage()
        metrics = bgpbench.evaluate_bgps(self.load_kg(source), self.ontology, bgps)
        metrics["source"] = source
        atomic_write(self.path("bgp_metrics.json"), _json(metrics))
        return {"metrics": "bgp_metrics.json"}

    def stats(self) -> dict:
        """Totals and validity before and after mending, tokens per stage and
        the weighted cost with prompt tokens at a quarter weight."""
        def report(stage):
            if not self.manifest.done(stage):
                return None
            return json.loads(self.read_artifact(stage, "report"))["report"]

        per_stage = {}
        for stage in PIPELINE_ORDER:
            if stage in self.manifest.stages:
                led = TokenLedger.from_dict(self.manifest.stages[stage].get("ledger", {}))
                if led.calls():
                    per_stage[stage] = {"prompt_tokens": led.prompt_tokens(),
                                        "completion_tokens": led.completion_tokens(), "calls": led.calls()}
        total = self.manifest.ledger()
        return {
            "pre_mend": report("validate"),
            "post_mend": report("validate-post"),
            "tokens": per_stage,
            "total_prompt_tokens": total.prompt_tokens(),
            "total_completion_tokens": total.completion_tokens(),
            "weighted_cost": weighted_cost(total.prompt_tokens(), total.completion_tokens(), 0.25),
        }

    def run_stage(self, stage: str, force: bool = False) -> Optional[dict[str, str]]:
        """Run one stage. Returns its artifacts, or None when it was already
        complete and `force` is not set."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        for need in PREREQUISITES[stage]:
            if not self.manifest.done(need):
                raise PrerequisiteError(stage, need)
        if self.manifest.done(stage) and not force:
            log.info("stage %s already complete; use --force to redo it", stage)
            return None
        jobs = {
            "extract": self._extract, "canon": self._canon, "dedup": self._dedup,
            "validate": lambda: self._validate(self.latest_kg_stage(), "validation_pre.json"),
            "validate-post": lambda: self._validate("mend", "validation_post.json"),
            "mend": self._mend, "stats": self._stats, "bgp-gen": self._bgp_gen, "bgp-eval": self._bgp_eval,
        }
        uses_models = stage in ("extract", "canon", "dedup", "mend")
        before = TokenLedger.from_dict(self.backends.ledger.to_dict()) if uses_models else TokenLedger()
        try:
            artifacts = jobs[stage]()
        except Exception as exc:
            self.manifest.failures.append({"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
            self.manifest.save(self.out)
            raise
        finally:
            if uses_models:
                _save_recordings(self.config, self.backends)
        spent = _ledger_delta(before, self.backends.ledger) if uses_models else TokenLedger()
        if force:
            self.manifest.invalidate_after(stage)
        self.manifest.failures = [f for f in self.manifest.failures
                                  if f.get("stage") != stage or "chunk" in f]
        self.manifest.mark(stage, artifacts, spent)
        self.manifest.save(self.out)
        return artifacts

    def run_pipeline(self, force: bool = False) -> dict[str, dict[str, str]]:
        out = {}
        for stage in PIPELINE_ORDER:
            got = self.run_stage(stage, force=force)
            out[stage] = got if got is not None else self.manifest.stages[stage]["artifacts"]
        return out


def _ledger_delta(before: TokenLedger, after: TokenLedger) -> TokenLedger:
    a, b = after.to_dict(), before.to_dict()
    delta = {}
    for stage, rec in a.items():
        prev = b.get(stage, {})
        diff = {k: rec[k] - prev.get(k, 0) for k in rec}
        if any(diff.values()):
            delta[stage] = diff
    return TokenLedger.from_dict(delta)


def run_pipeline(config: PipelineConfig, backends: Optional[Backends] = None, force: bool = False) -> Run:
    with RunLock(Path(config.out_dir)):
        run = Run(config, backends)
        run.run_pipeline(force=force)
    return run


def format_stats(summary: dict) -> str:
    fmt = lambda x: "n/a" if x is None else f"{x:.1f}"
    lines = []
    for label, key in (("pre-mend", "pre_mend"), ("post-mend", "post_mend")):
        r = summary.get(key)
        if r is None:
            lines.append(f"{label:<10} (not run)")
            continue
        lines.append(f"{label:<10} triples {r['valid_triples']}/{r['total_triples']} valid "
                     f"({fmt(r['pct_valid_triples'])}%)  qualifiers {r['valid_qualifiers']}/"
                     f"{r['total_qualifiers']} valid ({fmt(r['pct_valid_qualifiers'])}%)")
    for stage, t in summary["tokens"].items():
        lines.append(f"{stage:<14} prompt {t['prompt_tokens']:>9}  completion {t['completion_tokens']:>8}  "
                     f"calls {t['calls']:>5}")
    lines.append(f"total prompt {summary['total_prompt_tokens']}  completion {summary['total_completion_tokens']}  "
                 f"weighted cost {summary['weighted_cost']:.2f}")
    return "\n".join(lines)
