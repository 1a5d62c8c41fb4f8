"""Chat and embedding backends, deterministic mocks, cosine similarity and
the per-stage token ledger.

Live backends speak the common chat-completions / embeddings HTTP convention.
Mocks are bit-deterministic so tests can assert exact call counts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMBED_DIM = 256


class Stage(str, Enum):
    EXTRACT = "extract"
    CANON_TYPE = "canon_type"
    CANON_PRED = "canon_pred"
    DEDUP = "dedup"
    MEND_TRIPLE = "mend_triple"
    MEND_QUALIFIER = "mend_qualifier"


class BackendError(RuntimeError):
    """Transport failure that survived all retries."""


class MockMiss(BackendError):
    """A scripted mock received a prompt it has no entry for."""


@dataclass
class ChatExchange:
    stage: Stage
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int


# -- ledger -----------------------------------------------------------------

def weighted_cost(prompt_tokens: float, completion_tokens: float, prompt_weight: float = 0.25) -> float:
    """Prompt tokens discounted by the prompt-to-completion price ratio."""
    if prompt_weight <= 0:
        raise ValueError("prompt_weight must be positive")
    return prompt_tokens * prompt_weight + completion_tokens


class TokenLedger:
    """Thread-safe per-stage accumulator of (prompt, completion, calls)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._acc: dict[str, list[int]] = {s.value: [0, 0, 0] for s in Stage}

    def record(self, stage: Stage | str, prompt_tokens: int, completion_tokens: int) -> None:
        if prompt_tokens < 0 or completion_tokens < 0:
            raise ValueError("token counts must be non-negative")
        key = Stage(stage).value
        with self._lock:
            acc = self._acc[key]
            acc[0] += prompt_tokens
            acc[1] += completion_tokens
            acc[2] += 1

    def prompt_tokens(self, stage: Stage | str | None = None) -> int:
        return self._get(stage, 0)

    def completion_tokens(self, stage: Stage | str | None = None) -> int:
        return self._get(stage, 1)

    def calls(self, stage: Stage | str | None = None) -> int:
        return self._get(stage, 2)

    def _get(self, stage, idx: int) -> int:
        with self._lock:
            if stage is None:
                return sum(v[idx] for v in self._acc.values())
            return self._acc[Stage(stage).value][idx]

    def weighted_cost(self, prompt_weight: float = 0.25, stage: Stage | str | None = None) -> float:
        return weighted_cost(self.prompt_tokens(stage), self.completion_tokens(stage), prompt_weight)

    def to_dict(self) -> dict:
        with self._lock:
            return {k: {"prompt_tokens": v[0], "completion_tokens": v[1], "calls": v[2]}
                    for k, v in self._acc.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TokenLedger":
        led = cls()
        for k, v in data.items():
            led._acc[Stage(k).value] = [int(v["prompt_tokens"]), int(v["completion_tokens"]), int(v.get("calls", 0))]
        return led

    def merge(self, other: "TokenLedger") -> None:
        for k, v in other.to_dict().items():
            with self._lock:
                acc = self._acc[k]
                acc[0] += v["prompt_tokens"]
                acc[1] += v["completion_tokens"]
                acc[2] += v["calls"]


# -- chat backends -------------------------------------------------------

class ChatBackend(Protocol):
    def complete(self, stage: Stage, prompt: str) -> tuple[str, Optional[int], Optional[int]]:
        """Return (text, prompt_tokens, completion_tokens); counts may be None."""


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.split())


def prompt_digest(stage: Stage | str, prompt: str) -> str:
    blob = f"{Stage(stage).value}\n{normalize_prompt(prompt)}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class ScriptEntry:
    stage: Stage
    response: str
    digest: Optional[str] = None
    contains: Optional[str] = None


class ScriptedChat:
    """Chat mock answering from a fixed script.

    Entries are looked up by (stage, normalized-prompt digest) first; entries
    written with ``contains`` match any prompt of that stage containing the
    given (whitespace-normalized) substring, first match wins. Anything else
    raises MockMiss.
    """

    def __init__(self, entries: Sequence[ScriptEntry] = ()):
        self._by_digest: dict[str, str] = {}
        self._rules: list[ScriptEntry] = []
        for e in entries:
            self.add(e)

    def add(self, entry: ScriptEntry) -> None:
        if entry.digest:
            self._by_digest[entry.digest] = entry.response
        elif entry.contains is not None:
            self._rules.append(ScriptEntry(entry.stage, entry.response, contains=normalize_prompt(entry.contains)))
        else:
            raise ValueError("script entry needs a digest or a contains pattern")

    def on(self, stage: Stage | str, contains: str, response) -> "ScriptedChat":
        if not isinstance(response, str):
            response = json.dumps(response)
        self.add(ScriptEntry(Stage(stage), response, contains=contains))
        return self

    def on_prompt(self, stage: Stage | str, prompt: str, response) -> "ScriptedChat":
        if not isinstance(response, str):
            response = json.dumps(response)
        self.add(ScriptEntry(Stage(stage), response, digest=prompt_digest(stage, prompt)))
        return self

    def complete(self, stage: Stage, prompt: str):
        stage = Stage(stage)
        hit = self._by_digest.get(prompt_digest(stage, prompt))
        if hit is None:
            norm = normalize_prompt(prompt)
            for rule in self._rules:
                if rule.stage == stage and rule.contains in norm:
                    hit = rule.response
                    break
        if hit is None:
            raise MockMiss(f"scripted chat has no entry for stage {stage.value} prompt "
                           f"{prompt_digest(stage, prompt)[:12]}: {normalize_prompt(prompt)[-160:]!r}")
        return hit, whitespace_tokens(prompt), whitespace_tokens(hit)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChat":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        entries = []
        for rec in data:
            resp = rec["response"]
            if not isinstance(resp, str):
                resp = json.dumps(resp)
            entries.append(ScriptEntry(Stage(rec["stage"]), resp, digest=rec.get("prompt_digest"),
                                       contains=rec.get("contains")))
        return cls(entries)


class HTTPChat:
    """Chat-completions client over urllib. Credentials come from the environment."""

    def __init__(self, url: Optional[str] = None, model: str = "default", api_key: Optional[str] = None,
                 timeout: float = 120.0):
        self.url = url or os.environ.get("OAKMEND_CHAT_URL")
        if not self.url:
            raise BackendError("no chat endpoint configured (set OAKMEND_CHAT_URL)")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("OAKMEND_API_KEY")
        self.timeout = timeout

    def request_body(self, prompt: str) -> dict:
        return {"model": self.model, "messages": [{"role": "user", "content": prompt}]}

    @staticmethod
    def parse_response(payload: dict) -> tuple[str, Optional[int], Optional[int]]:
        text = payload["choices"][0]["message"]["content"]
        usage = payload.get("usage") or {}
        return text, usage.get("prompt_tokens"), usage.get("completion_tokens")

    def complete(self, stage: Stage, prompt: str):
        payload = _post_json(self.url, self.request_body(prompt), self.api_key, self.timeout)
        try:
            return self.parse_response(payload)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc!r}") from None


def _post_json(url: str, body: dict, api_key: Optional[str], timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(body).encode("utf-8"), method="POST",
                                 headers={"Content-Type": "application/json"})
    if api_key:
        req.add_header("Authorization", f"Bearer {api_key}")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
        raise BackendError(f"request to {url} failed: {exc}") from exc


class RecordingChat:
    """Wraps a backend and keeps every exchange so it can be replayed later."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, stage: Stage, prompt: str):
        text, p, c = self.inner.complete(stage, prompt)
        with self._lock:
            self.records.append({"stage": Stage(stage).value, "prompt_digest": prompt_digest(stage, prompt),
                                 "response": text})
        return text, p, c

    def save(self, path: str | Path) -> None:
        existing = []
        if Path(path).exists():
            existing = json.loads(Path(path).read_text(encoding="utf-8"))
        Path(path).write_text(json.dumps(existing + self.records, indent=1, ensure_ascii=False), encoding="utf-8")


class ChatClient:
    """Front door for chat calls: retries transport failures and books tokens."""

    def __init__(self, backend: ChatBackend, ledger: Optional[TokenLedger] = None, max_retries: int = 2,
                 retry_delay: float = 0.0):
        self.backend = backend
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.exchanges: list[ChatExchange] = []
        self._lock = threading.Lock()

    def chat(self, stage: Stage | str, prompt: str) -> str:
        stage = Stage(stage)
        attempt = 0
        while True:
            try:
                text, p, c = self.backend.complete(stage, prompt)
                break
            except MockMiss:
                raise
            except BackendError as exc:
                attempt += 1
                if attempt > self.max_retries:
                    raise
                log.warning("chat transport failure (attempt %d): %s", attempt, exc)
                if self.retry_delay:
                    time.sleep(self.retry_delay * attempt)
        p = whitespace_tokens(prompt) if p is None else p
        c = whitespace_tokens(text) if c is None else c
        self.ledger.record(stage, p, c)
        with self._lock:
            self.exchanges.append(ChatExchange(stage, prompt, text, p, c))
        return text


# -- embeddings --------------------------------------------------------------

class EmbeddingBackend(Protocol):
    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        ...


class TrigramEmbedder:
    """Character-trigram hashing into a fixed-size, L2-normalized vector.

    Hashing uses blake2b so vectors are identical across runs and platforms.
    """

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.calls = 0

    def vector(self, text: str) -> np.ndarray:
        s = " " + " ".join(text.casefold().split()) + " "
        v = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(s) - 2):
            h = hashlib.blake2b(s[i:i + 3].encode("utf-8"), digest_size=8).digest()
            v[int.from_bytes(h, "little") % self.dim] += 1.0
        n = np.linalg.norm(v)
        return v / n if n else v

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        self.calls += 1
        return [self.vector(t) for t in texts]


class HTTPEmbedder:
    def __init__(self, url: Optional[str] = None, model: str = "default", api_key: Optional[str] = None,
                 timeout: float = 120.0):
        self.url = url or os.environ.get("OAKMEND_EMBED_URL")
        if not self.url:
            raise BackendError("no embedding endpoint configured (set OAKMEND_EMBED_URL)")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("OAKMEND_API_KEY")
        self.timeout = timeout

    @staticmethod
    def parse_response(payload) -> list[list[float]]:
        # bare array of arrays, or the {"data": [{"embedding": ...}]} envelope
        if isinstance(payload, dict) and "data" in payload:
            return [item["embedding"] for item in payload["data"]]
        return payload

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        payload = _post_json(self.url, {"model": self.model, "input": list(texts)}, self.api_key, self.timeout)
        try:
            return [np.asarray(v, dtype=np.float64) for v in self.parse_response(payload)]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embedding response: {exc!r}") from None


class RecordedEmbedder:
    """Serves embeddings from a recorded {text: vector} table; misses are fatal."""

    def __init__(self, table: dict[str, list[float]]):
        self.table = table

    def embed_batch(self, texts):
        out = []
        for t in texts:
            if t not in self.table:
                raise MockMiss(f"no recorded embedding for {t!r}")
            out.append(np.asarray(self.table[t], dtype=np.float64))
        return out


class EmbeddingClient:
    """Unit-normalized embeddings with an exact-string cache."""

    def __init__(self, backend: EmbeddingBackend, cache: bool = True, max_retries: int = 2):
        self.backend = backend
        self.use_cache = cache
        self.max_retries = max_retries
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.backend_calls = 0

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        for t in texts:
            if not t or not t.strip():
                raise ValueError("cannot embed empty text")
        missing = [t for t in dict.fromkeys(texts) if not (self.use_cache and t in self._cache)]
        fresh: dict[str, np.ndarray] = {}
        if missing:
            attempt = 0
            while True:
                try:
                    vecs = self.backend.embed_batch(missing)
                    break
                except MockMiss:
                    raise
                except BackendError:
                    attempt += 1
                    if attempt > self.max_retries:
                        raise
            self.backend_calls += 1
            for t, v in zip(missing, vecs):
                v = np.asarray(v, dtype=np.float64)
                n = np.linalg.norm(v)
                fresh[t] = v / n if n else v
            if self.use_cache:
                with self._lock:
                    for t, v in fresh.items():
                        self._cache.setdefault(t, v)
        return [fresh[t] if t in fresh else self._cache[t] for t in texts]

    def recorded_table(self) -> dict[str, list[float]]:
        with self._lock:
            return {t: v.tolist() for t, v in sorted(self._cache.items())}


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class Backends:
    """The chat and embedding clients a pipeline run talks to."""
    chat: ChatClient
    embed: EmbeddingClient
    ledger: TokenLedger = field(default=None)

    def __post_init__(self):
        if self.ledger is None:
            self.ledger = self.chat.ledger


def mock_backends(chat: Optional[ScriptedChat] = None, ledger: Optional[TokenLedger] = None) -> Backends:
    ledger = ledger or TokenLedger()
    return Backends(ChatClient(chat or ScriptedChat(), ledger), EmbeddingClient(TrigramEmbedder()), ledger)
