import json

import pytest

from spoilergen.cli import main

from conftest import FIXTURES, write_config


@pytest.fixture
def cfg(tmp_path, sample_server):
    return write_config(tmp_path, sample_server, FIXTURES / "sample.jsonl")


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_ingest_ok_and_bad(tmp_path, cfg, capsys):
    assert run("ingest", "--config", cfg) == 0
    assert "validation: 2 records (multi=1, phrase=1)" in capsys.readouterr().out
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"uuid": "x"}\n')
    raw = json.loads(cfg.read_text())
    raw["datasets"]["validation"] = str(bad)
    cfg.write_text(json.dumps(raw))
    assert run("ingest", "--config", cfg) == 2


def test_usage_errors(cfg, tmp_path):
    assert run("select") == 1  # missing --config
    assert run("select", "--config", cfg, "--ranker", "magic") == 1
    assert run("select", "--config", tmp_path / "missing.json") == 2
    no_seed = tmp_path / "noseed.json"
    raw = json.loads(cfg.read_text())
    del raw["seed"]
    no_seed.write_text(json.dumps(raw))
    assert run("ingest", "--config", no_seed) == 2


def test_select_without_trained_scorer_is_data_error(cfg):
    assert run("select", "--config", cfg) == 2


def test_full_workflow(cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("convert-questions", "--config", cfg) == 0
    questions = {r["record_id"]: r for r in read_jsonl(out / "questions.validation.jsonl")}
    assert questions["moon-garden"]["question"] == "Which agency might plant a garden on the moon?"
    assert not questions["moon-garden"]["fallback"]

    assert run("export-finetune", "--config", cfg, "--split", "validation", "--mode", "typed") == 0
    texts = read_jsonl(out / "finetune.typed.validation.jsonl")
    assert texts[0]["text"].endswith("Answer: NASA\n")

    assert run("generate", "--config", cfg, "--split", "train") == 0
    rows = read_jsonl(out / "candidates.train.jsonl")
    assert [c["backend"] for c in rows[0]["candidates"]] == ["llama", "vicuna", "vicuna-typed", "deberta-q"]

    assert run("build-rank-data", "--config", cfg, "--ranker", "pairwise") == 0
    assert (out / "rank-data.pairwise.train.jsonl").exists()
    assert run("train-ranker", "--config", cfg) == 0
    assert run("train-ranker", "--config", cfg, "--ranker", "pairwise") == 0
    assert (tmp_path / "pointwise.scorer.json").exists()

    for ranker in ("pointwise", "pairwise"):
        assert run("select", "--config", cfg, "--ranker", ranker, "--out", out / f"{ranker}.jsonl") == 0
        decisions = read_jsonl(out / f"{ranker}.jsonl")
        assert [d["record_id"] for d in decisions] == ["moon-garden", "happy-habits"]
        assert all(d["chosen"] in d["pool"] for d in decisions)

    assert run("select", "--config", cfg, "--routing", "baseline") == 0
    baseline = {d["record_id"]: d for d in read_jsonl(out / "decisions.validation.jsonl")}
    assert baseline["moon-garden"]["chosen"]["backend"] == "deberta-q"
    assert baseline["happy-habits"]["chosen"]["backend"] == "vicuna-typed"

    assert run("generate", "--config", cfg) == 0  # enables per-backend rows
    capsys.readouterr()
    assert run("evaluate", "--config", cfg) == 0
    table = capsys.readouterr().out
    assert table.startswith("| Model | Spoiler type | N | BLEU | METEOR | Precision | Recall | F1 |")
    report = json.loads((out / "report.validation.json").read_text())
    assert report["metadata"]["seed"] == 42
    assert "deberta-q" in {r["model"] for r in report["rows"]}

    assert run("report", "--input", out / "report.validation.json", "--reference") == 0
    assert "Reference results" in capsys.readouterr().out
    assert run("report", "--config", cfg, "--format", "json", "--out", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_backend_down_exit_code(tmp_path, mock_factory):
    srv = mock_factory({"failures": {"vicuna": 100}})
    cfg = write_config(tmp_path, srv, FIXTURES / "sample.jsonl")
    assert run("convert-questions", "--config", cfg) == 3


def test_evaluate_before_select(cfg):
    assert run("evaluate", "--config", cfg) == 2
