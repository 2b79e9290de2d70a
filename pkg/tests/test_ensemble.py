import pytest

from spoilergen.backend import Candidate
from spoilergen.corpus import SpoilerType, load_dataset
from spoilergen.ensemble import (
    EnsembleConfig,
    Pipeline,
    SpoilerDecision,
    dedupe,
    dumps_decision,
    read_decisions,
    write_decisions,
)
from spoilergen.errors import NoCandidates, RecordError
from spoilergen.ranking import OracleScorer

from conftest import FIXTURES, fast_spec, make_record

ROLES = dict(llm_pool=["llama", "vicuna", "vicuna-typed"], typed_backend="vicuna-typed", qa_backend="deberta-q",
             question_backend="vicuna")


def config(**kw):
    return EnsembleConfig(**{**ROLES, **kw})


def specs(server, names=("llama", "vicuna", "vicuna-typed", "deberta-q")):
    return {n: fast_spec(n, server.base_url(n), retry_limit=0) for n in names}


def scripted(mock_factory, answers):
    """answers: {backend: text} for every record (empty string allowed)."""
    rules = [{"backend": b, "match": "Answer:$", "response": t} for b, t in answers.items()]
    return mock_factory({"completions": rules})


# --- config ---


@pytest.mark.parametrize("kw, message", [
    (dict(routing="hybrid", qa_backend=None), "qa_backend"),
    (dict(routing="baseline", qa_backend=None), "qa_backend"),
    (dict(routing="plain", ranker="none"), "single-backend"),
    (dict(typed_backend="nope"), "typed_backend"),
    (dict(routing="sideways"), "routing"),
])
def test_config_invariants(kw, message):
    with pytest.raises(ValueError, match=message):
        config(**kw)


def test_config_order_and_round_trip():
    cfg = config(priority=["deberta-q"])
    assert cfg.order == ["deberta-q", "llama", "vicuna", "vicuna-typed"]
    assert EnsembleConfig.from_dict(cfg.to_dict()) == cfg
    assert EnsembleConfig(["only"], ranker="none").llm_pool == ["only"]


def test_decision_chosen_must_be_in_pool():
    a, b = Candidate("a", "x", "r"), Candidate("b", "y", "r")
    with pytest.raises(ValueError):
        SpoilerDecision("r", b, (a,), "plain")
    d = SpoilerDecision("r", a, (a, b), "plain", "pointwise", (0.5, 0.1), "q?", False, {"x": "a", "y": "b"})
    assert SpoilerDecision.from_json(d.to_json()) == d


def test_dedupe_keeps_first_and_drops_empty():
    pool = [Candidate("", "a", "r"), Candidate("x", "b", "r"), Candidate("x", "c", "r"), Candidate("y", "d", "r")]
    assert [c.backend_name for c in dedupe(pool)] == ["b", "d"]


# --- pooling ---


def test_pool_three_distinct(mock_factory):
    srv = scripted(mock_factory, {"llama": "one", "vicuna": "two", "vicuna-typed": "three"})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        pool = pipe.pool_candidates(make_record())
    assert [(c.backend_name, c.text) for c in pool] == [("llama", "one"), ("vicuna", "two"), ("vicuna-typed", "three")]


def test_pool_dedup_and_empty(mock_factory):
    srv = scripted(mock_factory, {"llama": "same", "vicuna": "same", "vicuna-typed": ""})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        pool = pipe.pool_candidates(make_record())
    assert [(c.backend_name, c.text) for c in pool] == [("llama", "same")]


def test_pool_one_empty_two_ok(mock_factory):
    srv = scripted(mock_factory, {"llama": "", "vicuna": "two", "vicuna-typed": "three"})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        assert len(pipe.pool_candidates(make_record())) == 2


def test_pool_all_empty_raises(mock_factory):
    srv = scripted(mock_factory, {"llama": "", "vicuna": "", "vicuna-typed": ""})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        with pytest.raises(NoCandidates):
            pipe.pool_candidates(make_record())
        with pytest.raises(RecordError) as info:
            pipe.run_pipeline(make_record("bad"))
    assert info.value.record_id == "bad"


def test_unavailable_backend_is_skipped(mock_factory):
    srv = mock_factory({"completions": [{"match": "Answer:$", "response": "ok"}], "failures": {"llama": 99}})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        pool = pipe.pool_candidates(make_record())
        assert [c.backend_name for c in pool] == ["vicuna"]  # vicuna-typed duplicates "ok"
        assert pipe.meta.unavailable["llama"] == 1


def test_typed_backend_gets_typed_prompt(mock_factory):
    srv = scripted(mock_factory, {"llama": "a", "vicuna": "b", "vicuna-typed": "c"})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        pipe.pool_candidates(make_record(stype=SpoilerType.MULTI, spoiler=("x", "y")))
    prompts = {b: body["prompt"] for b, _, body in srv.requests}
    assert "enumerated list" in prompts["vicuna-typed"]
    assert "enumerated list" not in prompts["llama"]


# --- routing ---


def test_hybrid_routing_by_type(mock_factory):
    srv = scripted(mock_factory, {"llama": "l", "vicuna": "v", "vicuna-typed": "t", "deberta-q": "d"})
    with Pipeline(specs(srv), config(routing="hybrid"), OracleScorer()) as pipe:
        multi = pipe.route_candidates(make_record(stype=SpoilerType.MULTI, spoiler=("x", "y")))
        phrase = pipe.route_candidates(make_record(stype=SpoilerType.PHRASE))
    assert {c.backend_name for c in multi} == {"llama", "vicuna", "vicuna-typed"}
    assert [c.backend_name for c in phrase] == ["vicuna-typed", "deberta-q"]


def test_hybrid_passage_with_empty_qa(mock_factory):
    srv = scripted(mock_factory, {"llama": "l", "vicuna": "v", "vicuna-typed": "t", "deberta-q": ""})
    with Pipeline(specs(srv), config(routing="hybrid"), OracleScorer()) as pipe:
        pool = pipe.route_candidates(make_record(stype=SpoilerType.PASSAGE))
    assert [c.backend_name for c in pool] == ["vicuna-typed"]


def test_hybrid_fallback_to_other_llms(mock_factory):
    srv = scripted(mock_factory, {"llama": "l", "vicuna": "v", "vicuna-typed": "", "deberta-q": ""})
    with Pipeline(specs(srv), config(routing="hybrid"), OracleScorer()) as pipe:
        d = pipe.run_pipeline(make_record(stype=SpoilerType.PHRASE))
    assert d.routing_used == "hybrid-fallback"
    assert {c.backend_name for c in d.pool} == {"llama", "vicuna"}


@pytest.mark.parametrize("stype, answers, chosen, routing", [
    (SpoilerType.PHRASE, {"deberta-q": "d", "vicuna-typed": "t"}, "deberta-q", "baseline"),
    (SpoilerType.PASSAGE, {"deberta-q": "d", "vicuna-typed": "t"}, "deberta-q", "baseline"),
    (SpoilerType.MULTI, {"deberta-q": "d", "vicuna-typed": "t"}, "vicuna-typed", "baseline"),
    (SpoilerType.PHRASE, {"deberta-q": "", "vicuna-typed": "t"}, "vicuna-typed", "baseline-fallback"),
    (SpoilerType.MULTI, {"deberta-q": "d", "vicuna-typed": ""}, "deberta-q", "baseline-fallback"),
])
def test_baseline_rule(mock_factory, stype, answers, chosen, routing):
    srv = scripted(mock_factory, {"llama": "l", "vicuna": "v", **answers})
    with Pipeline(specs(srv), config(routing="baseline", ranker="none")) as pipe:
        d = pipe.run_pipeline(make_record(stype=stype, spoiler=("x", "y") if stype is SpoilerType.MULTI else ("x",)))
    assert d.chosen.backend_name == chosen and d.routing_used == routing
    assert all(b not in d.raw_outputs for b in ("llama", "vicuna"))


def test_baseline_both_empty(mock_factory):
    srv = scripted(mock_factory, {"llama": "l", "vicuna": "v", "vicuna-typed": "", "deberta-q": ""})
    with Pipeline(specs(srv), config(routing="baseline", ranker="none")) as pipe:
        with pytest.raises(RecordError):
            pipe.run_pipeline(make_record())


def test_single_backend_identity(mock_factory):
    srv = scripted(mock_factory, {"solo": "  spoiler text "})
    with Pipeline({"solo": fast_spec("solo", srv.base_url("solo"))}, EnsembleConfig(["solo"], ranker="none")) as pipe:
        d = pipe.run_pipeline(make_record())
    assert d.chosen == Candidate("spoiler text", "solo", "r1") and d.scores is None


def test_scorer_flavor_must_match(mock_factory):
    srv = scripted(mock_factory, {"llama": "a", "vicuna": "b", "vicuna-typed": "c"})
    with pytest.raises(ValueError):
        Pipeline(specs(srv), config(ranker="pairwise"), OracleScorer("pointwise"))
    with Pipeline(specs(srv), config(), None) as pipe:
        assert len(pipe.pool_candidates(make_record())) == 3
        with pytest.raises(ValueError, match="needs a scorer"):
            pipe.run_pipeline(make_record())


# --- end to end ---


def test_sample_selections(sample_backends):
    ds = load_dataset(FIXTURES / "sample.jsonl", "validation")
    with Pipeline(sample_backends, config(routing="hybrid"), OracleScorer()) as pipe:
        decisions = {d.record_id: d for d in pipe.run(ds)}
    moon, happy = decisions["moon-garden"], decisions["happy-habits"]
    assert moon.question == "Which agency might plant a garden on the moon?"
    assert moon.chosen.text == "NASA" and moon.chosen.backend_name == "deberta-q"
    assert {c.text for c in moon.pool} == {"NASA", "lunar sunlight"}
    assert happy.chosen.backend_name == "vicuna-typed"
    assert happy.chosen.text == ds.get("happy-habits").spoiler
    assert "deberta-q" not in {c.backend_name for c in happy.pool}


def test_question_fallback_flag(mock_factory):
    srv = mock_factory({"completions": [
        {"backend": "vicuna", "match": "Question:$", "response": ""},
        {"match": "Answer:$", "response": "x"},
    ]})
    with Pipeline(specs(srv), config(), OracleScorer()) as pipe:
        d = pipe.run_pipeline(make_record(question=None, clickbait="You won't believe this"))
    assert d.question == "You won't believe this" and d.question_fallback


def test_parallel_run_keeps_order_and_bytes(sample_backends, tmp_path):
    ds = load_dataset(FIXTURES / "sample.jsonl", "validation")
    records = list(ds) * 3
    records = [r.__class__(**{**r.__dict__, "id": f"{r.id}-{i}"}) for i, r in enumerate(records)]
    outs = []
    for parallelism in (1, 4):
        with Pipeline(sample_backends, config(routing="hybrid", parallelism=parallelism), OracleScorer()) as pipe:
            decisions = pipe.run(records)
        path = tmp_path / f"d{parallelism}.jsonl"
        write_decisions(decisions, path)
        outs.append(path.read_bytes())
        assert [d.record_id for d in decisions] == [r.id for r in records]
        assert [dumps_decision(d) for d in read_decisions(path)] == [dumps_decision(d) for d in decisions]
    assert outs[0] == outs[1]
