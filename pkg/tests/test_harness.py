import json
import random

import pytest

from spoilergen.backend import Candidate
from spoilergen.corpus import Dataset, SpoilerType
from spoilergen.ensemble import SpoilerDecision
from spoilergen.errors import DataError
from spoilergen.harness import (
    EvalReport,
    backend_outputs,
    evaluate,
    evaluate_outputs,
    load_reference_results,
    merge_reports,
    render_report,
)
from spoilergen.metrics import meteor, sentence_bleu, tokenize

from conftest import fast_spec, make_record


def dataset():
    return Dataset((
        make_record("p1", ("NASA",), SpoilerType.PHRASE),
        make_record("p2", ("promotional code",), SpoilerType.PHRASE),
        make_record("m1", ("bad breath", "bleeding gums"), SpoilerType.MULTI),
    ), "validation")


def decision(rid, text, backend="llama", raw=None):
    c = Candidate(text, backend, rid)
    return SpoilerDecision(rid, c, (c,), "plain", "pointwise", raw_outputs=raw or {backend: text})


def test_identity_run():
    ds = dataset()
    report = evaluate([decision(r.id, r.spoiler) for r in ds], ds)
    row = report.row("ensemble")
    assert row.bleu == pytest.approx(100.0)
    assert row.meteor == pytest.approx((0.5 + 0.9375 + meteor(["bad", "breath", "bleeding", "gums"],
                                                              ["bad", "breath", "bleeding", "gums"])) / 3)
    assert row.bert_f1 is None and report.metadata["bertscore"] is False


def test_type_breakdown_and_weighted_consistency():
    ds = dataset()
    outs = [decision("p1", "NASA"), decision("p2", "a code"), decision("m1", "bad breath")]
    report = evaluate(outs, ds)
    phrase, multi, overall = report.row("ensemble", "phrase"), report.row("ensemble", "multi"), report.row("ensemble")
    assert (phrase.n, multi.n, overall.n) == (2, 1, 3)
    with pytest.raises(KeyError):
        report.row("ensemble", "passage")
    for key in ("bleu", "meteor"):
        weighted = (getattr(phrase, key) * 2 + getattr(multi, key)) / 3
        assert getattr(overall, key) == pytest.approx(weighted)


def test_matches_hand_sums():
    ds = dataset()
    texts = {"p1": "NASA agency", "p2": "promotional codes", "m1": "bleeding gums"}
    report = evaluate([decision(k, v) for k, v in texts.items()], ds)
    hand = [sentence_bleu(tokenize(texts[r.id]), tokenize(r.spoiler)) for r in ds]
    assert report.row("ensemble").bleu == pytest.approx(100 * sum(hand) / 3)
    per = {r["record_id"]: r for r in report.per_record["ensemble"]}
    assert per["p1"]["bleu"] == pytest.approx(hand[0])


def test_order_invariance():
    ds = dataset()
    outs = [decision("p1", "NASA"), decision("p2", "a code"), decision("m1", "bad breath")]
    a = render_report(evaluate(outs, ds), "json")
    shuffled = outs[:]
    random.Random(3).shuffle(shuffled)
    assert render_report(evaluate(shuffled, ds), "json") == a


def test_evaluate_errors():
    ds = dataset()
    with pytest.raises(DataError):
        evaluate([], ds)
    with pytest.raises(DataError):
        evaluate([decision("ghost", "x")], ds)
    with pytest.raises(DataError):
        evaluate([decision("p1", "x"), decision("p1", "y")], ds)


def test_bertscore_columns_with_mock(sample_server):
    ds = dataset()
    emb = fast_spec("embedder", sample_server.base_url("embedder"), kind="embedding")
    report = evaluate([decision(r.id, r.spoiler) for r in ds], ds, emb)
    row = report.row("ensemble")
    assert row.bert_precision == pytest.approx(1.0)
    assert row.bert_f1 == pytest.approx(1.0)


def test_backend_rows_and_merge():
    ds = dataset()
    decisions = [decision(r.id, r.spoiler, raw={"llama": r.spoiler, "vicuna": "nope"}) for r in ds]
    ens = evaluate(decisions, ds)
    vic = evaluate_outputs(backend_outputs(decisions, "vicuna"), ds, model="vicuna")
    merged = merge_reports([ens, vic])
    assert merged.models == ["ensemble", "vicuna"]
    assert merged.row("vicuna").bleu < merged.row("ensemble").bleu
    partial = evaluate_outputs({"p1": "x"}, ds, model="other")
    with pytest.raises(ValueError):
        merge_reports([ens, partial])


def test_markdown_render():
    ds = Dataset((make_record("p1"),), "v")
    report = evaluate([decision("p1", "NASA")], ds)
    text = render_report(report)
    lines = text.splitlines()
    assert lines[0] == "| Model | Spoiler type | N | BLEU | METEOR | Precision | Recall | F1 |"
    assert lines[2] == "| ensemble | all | 1 | 100.00 | 0.500 | n/a | n/a | n/a |"
    assert len(lines) == 4  # header, rule, "all" row, phrase row
    assert render_report(report) == text
    header = lines[0]
    assert header.index("BLEU") < header.index("METEOR") < header.index("Precision") < header.index("Recall") < header.index("F1")


def test_json_round_trip_and_reference():
    ds = dataset()
    report = evaluate([decision(r.id, r.spoiler) for r in ds], ds, metadata={"seed": 42})
    text = render_report(report, "json")
    again = EvalReport.from_dict(json.loads(text))
    assert render_report(again, "json") == text
    assert again.metadata["seed"] == 42
    ref = load_reference_results()
    assert "not reproducible" in ref["note"].lower()
    rendered = render_report(report, include_reference=True)
    assert "Reference results" in rendered
    with pytest.raises(ValueError):
        render_report(report, "html")
