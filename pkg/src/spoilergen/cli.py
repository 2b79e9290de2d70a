"""Command line interface: ``spoilergen <command> --config run.json ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 backend error.
Intermediate files live in the config's ``output_dir``:
``questions.<split>.jsonl``, ``candidates.<split>.jsonl``,
``decisions.<split>.jsonl`` and ``report.<split>.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .backend import Candidate, RunMetadata, convert_to_question
from .config import RunConfig
from .corpus import Dataset, load_dataset, validate_record
from .ensemble import Pipeline, read_decisions, write_decisions
from .errors import BackendError, DataError, RecordError, SpoilerGenError
from .harness import EvalReport, evaluate, evaluate_outputs, merge_reports, render_report
from .mock_server import MockServer
from .prompting import build_finetune_corpus, load_typed_templates, write_jsonl
from .ranking import (
    LinearScorer,
    OracleScorer,
    RemoteScorer,
    build_pairwise_data,
    build_pointwise_data,
    train_pairwise,
    train_pointwise,
    write_examples,
)

log = logging.getLogger("spoilergen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ----------------------------------------------------------------


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"{path} not found (run the producing command first)")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(rows: Sequence[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _load_split(cfg: RunConfig, split: str) -> Dataset:
    ds = load_dataset(cfg.dataset_path(split), split)
    qpath = cfg.out(f"questions.{split}.jsonl")
    if qpath.exists():
        ds = ds.with_questions({row["record_id"]: row["question"] for row in _read_jsonl(qpath)})
    return ds


def _typed_templates(cfg: RunConfig):
    return load_typed_templates(cfg.typed_templates) if cfg.typed_templates else None


def _load_pools(cfg: RunConfig, ds: Dataset) -> list[tuple]:
    pools = []
    for row in _read_jsonl(cfg.out(f"candidates.{ds.split_name}.jsonl")):
        rid = row["record_id"]
        record = ds.get(rid)
        if row.get("question") and not record.question:
            record = record.with_question(row["question"])
        pools.append((record, [Candidate(c["text"], c["backend"], rid) for c in row["candidates"]]))
    return pools


def _scorer(cfg: RunConfig, ranker: str, meta: RunMetadata):
    if ranker == "oracle":
        return OracleScorer("pointwise")
    if ranker == "none" or cfg.ensemble.routing == "baseline":
        return None
    if cfg.remote_scorer:
        return RemoteScorer(cfg.backends[cfg.remote_scorer], ranker, meta)
    path = cfg.scorers.get(ranker)
    if path is None or not path.exists():
        raise DataError(f"no trained {ranker} scorer at {path} (run train-ranker first)")
    return LinearScorer.load(path)


def _pipeline(cfg: RunConfig, scorer=None, meta: RunMetadata | None = None) -> Pipeline:
    return Pipeline(
        cfg.backends, cfg.ensemble, scorer,
        typed_templates=_typed_templates(cfg), max_article_chars=cfg.max_article_chars, meta=meta,
    )


# --- commands ---------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg.dataset_path(args.split), args.split)
    invalid = {r.id: validate_record(r) for r in ds}
    invalid = {k: v for k, v in invalid.items() if v}
    types = Counter(r.spoiler_type.value for r in ds)
    print(f"{args.split}: {len(ds)} records ({', '.join(f'{k}={v}' for k, v in sorted(types.items()))})")
    for note in ds.load_notes:
        print(f"note: {note}")
    for rid, problems in invalid.items():
        print(f"invalid {rid}: {', '.join(problems)}")
    return EXIT_DATA if invalid else EXIT_OK


def cmd_convert_questions(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg.dataset_path(args.split), args.split)
    name = cfg.ensemble.question_backend
    if name is None:
        raise DataError("config has no ensemble.question_backend")
    meta = RunMetadata()
    spec = cfg.backends[name]
    rows = []
    for r in ds:
        question = convert_to_question(spec, r.clickbait, meta, record_id=r.id)
        rows.append({"record_id": r.id, "question": question, "fallback": r.id in meta.question_fallbacks})
    out = Path(args.out) if args.out else cfg.out(f"questions.{args.split}.jsonl")
    _write_jsonl(rows, out)
    print(f"wrote {len(rows)} questions to {out} ({len(meta.question_fallbacks)} fallbacks)")
    return EXIT_OK


def cmd_export_finetune(cfg: RunConfig, args) -> int:
    ds = _load_split(cfg, args.split)
    prompts = build_finetune_corpus(
        ds, args.mode, templates=_typed_templates(cfg), max_article_chars=cfg.max_article_chars
    )
    out = Path(args.out) if args.out else cfg.out(f"finetune.{args.mode}.{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_jsonl(prompts, out)
    print(f"wrote {n} training texts to {out}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    ds = _load_split(cfg, args.split)
    meta = RunMetadata()
    names = cfg.ensemble.order
    with _pipeline(cfg, meta=meta) as pipe:

        def one(record):
            record, _ = pipe.ensure_question(record)
            _, raw = pipe.gather(record, names)
            return {
                "record_id": record.id,
                "question": record.question,
                "candidates": [{"backend": n, "text": raw[n]} for n in names if n in raw],
            }

        with ThreadPoolExecutor(max_workers=cfg.ensemble.parallelism) as ex:
            rows = list(ex.map(one, ds))
    out = Path(args.out) if args.out else cfg.out(f"candidates.{args.split}.jsonl")
    _write_jsonl(rows, out)
    print(f"wrote candidates for {len(rows)} records to {out}")
    return EXIT_OK


def _rank_data(cfg: RunConfig, args):
    ds = _load_split(cfg, args.split)
    pools = _load_pools(cfg, ds)
    if args.ranker == "pairwise":
        return build_pairwise_data(pools)
    return build_pointwise_data(pools)


def cmd_build_rank_data(cfg: RunConfig, args) -> int:
    examples = _rank_data(cfg, args)
    out = Path(args.out) if args.out else cfg.out(f"rank-data.{args.ranker}.{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_examples(examples, out)
    print(f"wrote {n} {args.ranker} examples to {out}")
    return EXIT_OK


def cmd_train_ranker(cfg: RunConfig, args) -> int:
    examples = _rank_data(cfg, args)
    if args.ranker == "pairwise":
        scorer = train_pairwise(examples, cfg.trainer)
        summary = f"holdout balanced accuracy {scorer.info.get('holdout_balanced_accuracy', float('nan')):.4f}"
    else:
        scorer = train_pointwise(examples, cfg.trainer)
        summary = f"training MSE {scorer.info['train_mse']:.6f}"
    out = Path(args.out) if args.out else cfg.scorers.get(args.ranker) or cfg.out(f"{args.ranker}.scorer.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    scorer.save(out)
    print(f"trained {args.ranker} scorer on {len(examples)} examples: {summary}; saved to {out}")
    return EXIT_OK


def cmd_select(cfg: RunConfig, args) -> int:
    ranker = "oracle" if args.ranker == "oracle" else cfg.ensemble.ranker
    ds = _load_split(cfg, args.split)
    meta = RunMetadata()
    scorer = _scorer(cfg, ranker, meta)
    with _pipeline(cfg, scorer, meta) as pipe:
        decisions = pipe.run(ds)
    out = Path(args.out) if args.out else cfg.out(f"decisions.{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_decisions(decisions, out)
    print(f"wrote {len(decisions)} decisions to {out}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg.dataset_path(args.split), args.split)
    path = Path(args.decisions) if args.decisions else cfg.out(f"decisions.{args.split}.jsonl")
    if not path.exists():
        raise DataError(f"{path} not found (run select first)")
    decisions = read_decisions(path)
    embedder = cfg.backends[cfg.embedder] if cfg.embedder else None
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "split": args.split}
    reports = [evaluate(decisions, ds, embedder, model=args.model, metadata=meta)]

    cand_path = cfg.out(f"candidates.{args.split}.jsonl")
    if cand_path.exists():
        decided = {d.record_id for d in decisions}
        per_backend: dict[str, dict[str, str]] = {}
        for row in _read_jsonl(cand_path):
            if row["record_id"] in decided:
                for c in row["candidates"]:
                    per_backend.setdefault(c["backend"], {})[row["record_id"]] = c["text"]
        for name in cfg.ensemble.order:
            outputs = per_backend.get(name, {})
            outputs = {rid: outputs.get(rid, "") for rid in sorted(decided)}
            reports.append(evaluate_outputs(outputs, ds, embedder, model=name))
    report = merge_reports(reports)
    out = Path(args.out) if args.out else cfg.out(f"report.{args.split}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "json"), encoding="utf-8")
    print(render_report(report, "markdown"), end="")
    return EXIT_OK


def cmd_report(cfg: RunConfig | None, args) -> int:
    path = Path(args.input) if args.input else cfg.out(f"report.{args.split}.json")
    if not path.exists():
        raise DataError(f"{path} not found (run evaluate first)")
    report = EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    text = render_report(report, args.format, include_reference=args.reference)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_mock_serve(cfg, args) -> int:
    server = MockServer(args.fixture, host=args.host, port=args.port)
    print(f"mock server on {server.url} (fixture {args.fixture}); Ctrl-C to stop", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "validate a corpus split"),
    "convert-questions": (cmd_convert_questions, "rewrite clickbaits as questions"),
    "export-finetune": (cmd_export_finetune, "write filled training templates as JSONL"),
    "generate": (cmd_generate, "query every backend and store raw candidates"),
    "build-rank-data": (cmd_build_rank_data, "dump pointwise/pairwise ranker training data"),
    "train-ranker": (cmd_train_ranker, "train a pointwise or pairwise scorer"),
    "select": (cmd_select, "run the ensemble over a split and log decisions"),
    "evaluate": (cmd_evaluate, "score decisions (and per-backend outputs) against gold"),
    "report": (cmd_report, "render an evaluation report"),
    "mock-serve": (cmd_mock_serve, "serve a fixture-driven mock backend"),
}
NO_CONFIG = {"mock-serve"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spoilergen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "mock-serve":
            p.add_argument("--fixture", required=True)
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8080)
            continue
        p.add_argument("--config", required=name != "report")
        p.add_argument("--split", default="train" if name in ("export-finetune", "build-rank-data", "train-ranker") else "validation")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name in ("select", "evaluate"):
            p.add_argument("--routing", choices=["plain", "hybrid", "baseline"])
        if name in ("select",):
            p.add_argument("--ranker", choices=["pointwise", "pairwise", "none", "oracle"])
        if name in ("build-rank-data", "train-ranker"):
            p.add_argument("--ranker", choices=["pointwise", "pairwise"], default="pointwise")
        if name == "export-finetune":
            p.add_argument("--mode", choices=["general", "typed"], default="general")
        if name == "evaluate":
            p.add_argument("--decisions")
            p.add_argument("--model", default="ensemble")
        if name == "report":
            p.add_argument("--input")
            p.add_argument("--format", choices=["markdown", "json"], default="markdown")
            p.add_argument("--reference", action="store_true", help="append published reference tables")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = None
        if args.command not in NO_CONFIG and args.config:
            cfg = RunConfig.load(args.config)
            routing = getattr(args, "routing", None)
            ranker = getattr(args, "ranker", None) if args.command == "select" else None
            if ranker == "oracle":
                ranker = "pointwise"  # cmd_select swaps in the oracle scorer
            if routing or ranker or args.seed is not None:
                cfg = cfg.with_overrides(routing, ranker, args.seed)
        elif args.command == "report" and not args.input:
            raise ValueError("report needs --config or --input")
        return handler(cfg, args)
    except RecordError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND if isinstance(exc.cause, BackendError) else EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, SpoilerGenError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
