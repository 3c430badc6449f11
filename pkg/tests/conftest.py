import json
import sys
from pathlib import Path

import pytest

from grouprag.gateway import Gateway, MockBackend, MockRule, MockScript
from grouprag.records import Question
from grouprag.retrieval import Chunk, Corpus, ChunkingConfig, build_index

FIXTURE = Path(__file__).parent / "fixtures" / "mini"
FIXTURE_CONFIG = FIXTURE / "config.yaml"


def mock_gateway(rules, default=None, max_in_flight=1) -> Gateway:
    """Gateway over a script given as (stage, match, response) triples."""
    script = MockScript(tuple(MockRule(*r) for r in rules), default_response=default)
    return Gateway(MockBackend(script), max_in_flight=max_in_flight)


def make_index(texts):
    """Index whose chunk ids are ``doc:0`` for each ``doc -> text`` entry."""
    chunks = [Chunk(f"{doc}:0", doc, text, len(text.split())) for doc, text in texts.items()]
    return build_index(Corpus(chunks, ChunkingConfig()))


@pytest.fixture
def question():
    return Question(
        id="t1",
        stem="A 67-year-old man has fever and productive cough with chest pain.",
        options={"A": "Influenza", "B": "Streptococcus pneumoniae", "C": "Legionella", "D": "Candida"},
        gold_option="B",
    )


@pytest.fixture
def small_index():
    return make_index(
        {
            "pneumonia": "Pneumonia presents with fever, productive cough and pleuritic chest pain. "
            "Streptococcus pneumoniae is the most common cause.",
            "mi": "Myocardial infarction causes crushing chest pain, diaphoresis and ST elevation.",
            "thyroid": "Hypothyroidism causes fatigue, cold intolerance and weight gain.",
        }
    )


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
