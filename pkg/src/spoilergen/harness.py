"""Batch evaluation of spoiler decisions and report rendering."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backend import BackendSpec, embed_token_list
from .corpus import Dataset, SpoilerType
from .ensemble import SpoilerDecision
from .errors import DataError
from .metrics import score_pair

TYPE_ORDER = ("all", *(t.value for t in SpoilerType))
METRIC_KEYS = ("bleu", "meteor", "bert_precision", "bert_recall", "bert_f1")


@dataclass(frozen=True)
class ReportRow:
    model: str
    spoiler_type: str
    n: int
    bleu: float  # 0-100
    meteor: float
    bert_precision: float | None = None
    bert_recall: float | None = None
    bert_f1: float | None = None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    # model -> per-record metric dicts (BLEU on the 0-1 scale), sorted by record id
    per_record: dict[str, list[dict]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def row(self, model: str, spoiler_type: str = "all") -> ReportRow:
        for r in self.rows:
            if r.model == model and r.spoiler_type == spoiler_type:
                return r
        raise KeyError((model, spoiler_type))

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "per_record": self.per_record,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls([ReportRow(**r) for r in d["rows"]], dict(d.get("per_record", {})), dict(d.get("metadata", {})))


def caching_embedder(spec: BackendSpec) -> Callable[[Sequence[str]], np.ndarray]:
    cache: dict[tuple[str, ...], np.ndarray] = {}

    def embed(tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        if key not in cache:
            cache[key] = embed_token_list(spec, tokens)
        return cache[key]

    return embed


def _mean(values: list[float | None]) -> float | None:
    if not values or any(v is None for v in values):
        return None
    return float(sum(values) / len(values))


def _aggregate(model: str, spoiler_type: str, records: list[dict]) -> ReportRow:
    means = {k: _mean([r[k] for r in records]) for k in METRIC_KEYS}
    return ReportRow(model, spoiler_type, len(records), means["bleu"] * 100.0, means["meteor"],
                     means["bert_precision"], means["bert_recall"], means["bert_f1"])


def evaluate_outputs(
    outputs: Mapping[str, str],
    dataset: Dataset,
    embedder: BackendSpec | Callable | None = None,
    model: str = "ensemble",
) -> EvalReport:
    """Score ``record_id -> spoiler text`` against the gold spoilers.

    Records are processed in sorted id order, so the result does not depend
    on the order of ``outputs``. Empty outputs score zero.
    """
    if not outputs:
        raise DataError("nothing to evaluate")
    if isinstance(embedder, BackendSpec):
        embedder = caching_embedder(embedder)
    per_record = []
    for rid in sorted(outputs):
        record = dataset.get(rid)
        if not record.has_gold:
            raise DataError(f"record {rid!r} has no gold spoiler")
        m = score_pair(outputs[rid], record.spoiler, embedder)
        per_record.append({"record_id": rid, "spoiler_type": record.spoiler_type.value, **m.to_dict()})

    rows = [_aggregate(model, "all", per_record)]
    for t in TYPE_ORDER[1:]:
        group = [r for r in per_record if r["spoiler_type"] == t]
        if group:
            rows.append(_aggregate(model, t, group))
    meta = {"n_records": len(per_record), "bertscore": embedder is not None}
    return EvalReport(rows, {model: per_record}, meta)


def evaluate(
    decisions: Sequence[SpoilerDecision],
    dataset: Dataset,
    embedder: BackendSpec | Callable | None = None,
    model: str = "ensemble",
    metadata: Mapping | None = None,
) -> EvalReport:
    """Metrics of the chosen spoilers, overall and per spoiler type.

    BERTScore columns are ``None`` when no embedder is given.
    """
    if not decisions:
        raise DataError("empty decision list")
    outputs = {}
    for d in decisions:
        if d.record_id in outputs:
            raise DataError(f"duplicate decision for record {d.record_id!r}")
        if d.record_id not in dataset:
            raise DataError(f"decision for unknown record {d.record_id!r}")
        outputs[d.record_id] = d.chosen.text
    report = evaluate_outputs(outputs, dataset, embedder, model)
    report.metadata.update(decision_stats(decisions))
    if metadata:
        report.metadata.update(metadata)
    return report


def decision_stats(decisions: Iterable[SpoilerDecision]) -> dict:
    decisions = list(decisions)
    return {
        "question_fallbacks": sum(d.question_fallback for d in decisions),
        "routing_counts": dict(sorted(Counter(d.routing_used for d in decisions).items())),
        "chosen_backend_counts": dict(sorted(Counter(d.chosen.backend_name for d in decisions).items())),
    }


def backend_outputs(decisions: Iterable[SpoilerDecision], backend: str) -> dict[str, str]:
    """What one backend produced for each decided record ("" when it was not asked)."""
    return {d.record_id: d.raw_outputs.get(backend, "") for d in decisions}


def merge_reports(reports: Iterable[EvalReport]) -> EvalReport:
    reports = list(reports)
    rows: list[ReportRow] = []
    per_record: dict[str, list[dict]] = {}
    metadata: dict = {}
    record_sets = set()
    for rep in reports:
        for model, recs in rep.per_record.items():
            if model in per_record:
                raise ValueError(f"model {model!r} appears in more than one report")
            per_record[model] = recs
            record_sets.add(tuple(r["record_id"] for r in recs))
        rows.extend(rep.rows)
        metadata.update(rep.metadata)
    if len(record_sets) > 1:
        raise ValueError("reports were computed over different record sets")
    return EvalReport(rows, per_record, metadata)


# --- rendering --------------------------------------------------------------

_HEADER = ("Model", "Spoiler type", "N", "BLEU", "METEOR", "Precision", "Recall", "F1")


def _fmt(value: float | None, digits: int) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _markdown_rows(rows: Iterable[ReportRow | dict], with_n: bool = True) -> list[str]:
    header = _HEADER if with_n else tuple(h for h in _HEADER if h != "N")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        r = asdict(r) if isinstance(r, ReportRow) else r
        cells = [r["model"], r["spoiler_type"]]
        if with_n:
            cells.append(str(r["n"]))
        cells += [
            _fmt(r["bleu"], 2),
            _fmt(r["meteor"], 3),
            _fmt(r["bert_precision"], 3),
            _fmt(r["bert_recall"], 3),
            _fmt(r["bert_f1"], 3),
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def load_reference_results() -> dict:
    path = resources.files("spoilergen") / "data" / "reference_results.json"
    return json.loads(path.read_text(encoding="utf-8"))


def render_report(report: EvalReport, fmt: str = "markdown", include_reference: bool = False) -> str:
    """Render as a markdown table (BLEU x100, other metrics 0-1) or stable JSON."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = _markdown_rows(report.rows)
    if include_reference:
        ref = load_reference_results()
        lines += ["", "Reference results (published, context only):", "", ref["note"]]
        for name, rows in ref["tables"].items():
            lines += ["", f"**{name}**", ""]
            lines += _markdown_rows(rows, with_n=False)
    return "\n".join(lines) + "\n"
