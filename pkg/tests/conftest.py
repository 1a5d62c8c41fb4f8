from pathlib import Path

import pytest

from oakmend.llmgate import ChatClient, EmbeddingClient, ScriptedChat, TokenLedger, TrigramEmbedder
from oakmend.ontology import read_ontology

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"


@pytest.fixture(scope="session")
def library_ontology():
    return read_ontology(FIXTURES / "library_ontology.json")


@pytest.fixture(scope="session")
def toy_ontology():
    return read_ontology(TOY / "ontology.json")


@pytest.fixture
def embed():
    return EmbeddingClient(TrigramEmbedder())


@pytest.fixture
def script():
    return ScriptedChat()


@pytest.fixture
def chat(script):
    return ChatClient(script, TokenLedger())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
