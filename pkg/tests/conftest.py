import json
from pathlib import Path

import pytest

from spoilergen.backend import BackendSpec
from spoilergen.corpus import ClickbaitRecord, SpoilerType, normalize_spoiler
from spoilergen.mock_server import MockServer

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

SAMPLE_BACKENDS = ("llama", "vicuna", "vicuna-typed", "deberta-q")

# one "PASS/FAIL <criterion>: <detail>" line per acceptance criterion
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def corpus_line(uuid, clickbait, paragraphs, spoiler, tag, **extra):
    obj = {"uuid": uuid, "postText": [clickbait] if isinstance(clickbait, str) else clickbait,
           "targetParagraphs": paragraphs, "spoiler": spoiler, "tags": [tag], **extra}
    return json.dumps(obj)


def make_record(rid="r1", spoiler=("NASA",), stype=SpoilerType.PHRASE, question="Which agency?",
                article="NASA wants to plant a garden on the moon.", clickbait="Agency might plant a garden"):
    return ClickbaitRecord(rid, clickbait, article, tuple(spoiler), normalize_spoiler(spoiler), stype, question)


def fast_spec(name, base_url, kind="completion", **kw):
    kw.setdefault("timeout", 5.0)
    kw.setdefault("retry_limit", 2)
    kw.setdefault("backoff", 0.01)
    return BackendSpec(name=name, base_url=base_url, kind=kind, **kw)


@pytest.fixture
def mock_factory():
    servers = []

    def start(fixture):
        server = MockServer(fixture).start()
        servers.append(server)
        return server

    yield start
    for s in servers:
        s.stop()


@pytest.fixture
def sample_server(mock_factory):
    return mock_factory(FIXTURES / "sample_mock.json")


@pytest.fixture
def sample_backends(sample_server):
    specs = {n: fast_spec(n, sample_server.base_url(n)) for n in SAMPLE_BACKENDS}
    specs["embedder"] = fast_spec("embedder", sample_server.base_url("embedder"), kind="embedding")
    return specs


def write_config(tmp_path, server, dataset, **overrides):
    """Run config for the two-record sample fixture, pointing at ``server``."""
    cfg = {
        "seed": 42,
        "datasets": {"validation": str(dataset), "train": str(dataset)},
        "backends": [
            {"name": n, "base_url": server.base_url(n), "kind": "completion",
             "timeout": 5, "retry_limit": 1, "backoff": 0.01}
            for n in SAMPLE_BACKENDS
        ] + [{"name": "embedder", "base_url": server.base_url("embedder"), "kind": "embedding", "timeout": 5}],
        "ensemble": {
            "llm_pool": ["llama", "vicuna", "vicuna-typed"],
            "typed_backend": "vicuna-typed",
            "qa_backend": "deberta-q",
            "question_backend": "vicuna",
            "routing": "hybrid",
            "ranker": "pointwise",
            "parallelism": 2,
        },
        "scorers": {"pointwise": "pointwise.scorer.json", "pairwise": "pairwise.scorer.json"},
        "metrics": {"embedder": "embedder"},
        "output_dir": str(tmp_path / "out"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
