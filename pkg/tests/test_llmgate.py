import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oakmend.llmgate import (
    BackendError, ChatClient, EmbeddingClient, HTTPChat, HTTPEmbedder, MockMiss, RecordedEmbedder, RecordingChat,
    ScriptedChat, Stage, TokenLedger, TrigramEmbedder, cosine, prompt_digest, weighted_cost,
)


def test_weighted_cost_oracle():
    assert weighted_cost(1000, 100) == pytest.approx(350.0)
    assert weighted_cost(1000, 100, prompt_weight=0.5) == pytest.approx(600.0)
    with pytest.raises(ValueError):
        weighted_cost(1, 1, prompt_weight=0)


def test_ledger_accumulates_per_stage():
    led = TokenLedger()
    led.record(Stage.EXTRACT, 100, 10)
    led.record("extract", 50, 5)
    led.record(Stage.MEND_TRIPLE, 8, 2)
    assert led.prompt_tokens("extract") == 150 and led.completion_tokens("extract") == 15
    assert led.calls("extract") == 2 and led.calls() == 3
    assert led.weighted_cost() == pytest.approx(158 * 0.25 + 17)
    again = TokenLedger.from_dict(led.to_dict())
    assert again.to_dict() == led.to_dict()
    again.merge(led)
    assert again.calls() == 6
    with pytest.raises(ValueError):
        led.record(Stage.MEND_TRIPLE, -1, 0)


class Flaky:
    def __init__(self, failures):
        self.failures = failures

    def complete(self, stage, prompt):
        if self.failures:
            self.failures -= 1
            raise BackendError("connection reset")
        return "ok", None, 7


def test_transport_failures_retry_then_succeed():
    client = ChatClient(Flaky(2), max_retries=2)
    assert client.chat(Stage.CANON_TYPE, "one two three") == "ok"
    # missing prompt count falls back to whitespace tokens
    assert client.ledger.prompt_tokens() == 3 and client.ledger.completion_tokens() == 7


def test_transport_failures_exhaust_retries():
    client = ChatClient(Flaky(3), max_retries=2)
    with pytest.raises(BackendError):
        client.chat(Stage.CANON_TYPE, "x")
    assert client.ledger.calls() == 0


def test_scripted_digest_beats_rules_and_whitespace_is_normalized():
    s = ScriptedChat().on(Stage.CANON_TYPE, "pick one", "A").on_prompt(Stage.CANON_TYPE, "pick one  of\nthese", "B")
    assert s.complete(Stage.CANON_TYPE, "pick   one of these")[0] == "B"
    assert s.complete(Stage.CANON_TYPE, "please pick\none now")[0] == "A"


def test_scripted_first_rule_wins_and_stage_matters():
    s = ScriptedChat().on("mend_triple", "x", "first").on("mend_triple", "x", "second")
    assert s.complete(Stage.MEND_TRIPLE, "xx")[0] == "first"
    with pytest.raises(MockMiss):
        s.complete(Stage.EXTRACT, "xx")


def test_mock_miss_is_not_retried():
    calls = []

    class Missing:
        def complete(self, stage, prompt):
            calls.append(1)
            raise MockMiss("nope")

    with pytest.raises(MockMiss):
        ChatClient(Missing(), max_retries=5).chat(Stage.EXTRACT, "p")
    assert len(calls) == 1


def test_script_file_roundtrip(tmp_path):
    rec = RecordingChat(ScriptedChat().on("dedup", "merge", {"answer": 1}))
    client = ChatClient(rec)
    client.chat(Stage.DEDUP, "should we merge these")
    path = tmp_path / "chat.json"
    rec.save(path)
    replay = ScriptedChat.from_file(path)
    assert replay.complete(Stage.DEDUP, "should  we merge these")[0] == '{"answer": 1}'
    assert rec.records[0]["prompt_digest"] == prompt_digest("dedup", "should we merge these")


def test_trigram_embedder_is_deterministic_and_unit():
    a = TrigramEmbedder().vector("Princeton University")
    b = TrigramEmbedder().vector("princeton   university")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert a.shape == (256,)


def test_embedding_cache_avoids_backend_calls():
    client = EmbeddingClient(TrigramEmbedder())
    client.embed_many(["a b", "c d", "a b"])
    client.embed("c d")
    assert client.backend_calls == 1
    with pytest.raises(ValueError):
        client.embed("  ")


def test_recorded_embedder_misses_are_fatal():
    client = EmbeddingClient(RecordedEmbedder({"known": [3.0, 4.0]}))
    assert client.embed("known") == pytest.approx(np.array([0.6, 0.8]))
    with pytest.raises(MockMiss):
        client.embed("unknown")


def test_cosine_edge_cases():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(ValueError, match="dimension"):
        cosine(np.ones(2), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=30), st.text(min_size=1, max_size=30))
def test_cosine_is_symmetric_and_bounded(x, y):
    e = TrigramEmbedder()
    u, v = e.vector(x), e.vector(y)
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine(v, u))


def test_http_response_parsing():
    payload = {"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 4, "completion_tokens": 1}}
    assert HTTPChat.parse_response(payload) == ("hi", 4, 1)
    assert HTTPChat.parse_response({"choices": [{"message": {"content": "x"}}]}) == ("x", None, None)
    assert HTTPEmbedder.parse_response({"data": [{"embedding": [1, 2]}]}) == [[1, 2]]
    assert HTTPEmbedder.parse_response([[1, 2]]) == [[1, 2]]


def test_http_chat_requires_endpoint(monkeypatch):
    monkeypatch.delenv("OAKMEND_CHAT_URL", raising=False)
    with pytest.raises(BackendError, match="OAKMEND_CHAT_URL"):
        HTTPChat()


def test_http_chat_unreachable_is_backend_error():
    chat = HTTPChat(url="http://127.0.0.1:9/v1/chat", timeout=1.0)
    with pytest.raises(BackendError):
        chat.complete(Stage.EXTRACT, "hello")
