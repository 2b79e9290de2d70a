"""Candidate pooling, routing and final spoiler selection for one record."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import httpx

from .backend import BackendSpec, Candidate, RunMetadata, convert_to_question, generate_candidate
from .corpus import ClickbaitRecord, Dataset, SpoilerType
from .errors import BackendUnavailable, NoCandidates, RecordError, SpoilerGenError
from .prompting import (
    DEFAULT_MAX_ARTICLE_CHARS,
    FilledPrompt,
    PromptTemplate,
    default_typed_templates,
    spoiler_prompt,
    typed_spoiler_prompt,
)
from .ranking import (
    Scorer,
    choose_by_scores,
    choose_by_tournament,
    pairwise_tournament,
    pointwise_scores,
)

log = logging.getLogger(__name__)

ROUTINGS = ("plain", "hybrid", "baseline")
RANKERS = ("pointwise", "pairwise", "none")


@dataclass
class EnsembleConfig:
    """Which backends play which role and how the final spoiler is picked.

    ``llm_pool`` lists the generator backends (by name, in priority order);
    ``typed_backend`` names the pool member that receives per-type prompts and
    ``qa_backend`` the extractive-QA style backend used by hybrid/baseline
    routing. ``priority`` overrides the default order
    ``llm_pool + [qa_backend]`` used for pooling and tie-breaking.
    """

    llm_pool: list[str]
    typed_backend: str | None = None
    qa_backend: str | None = None
    routing: str = "plain"
    ranker: str = "pointwise"
    priority: list[str] = field(default_factory=list)
    question_backend: str | None = None
    parallelism: int = 1

    def __post_init__(self) -> None:
        self.llm_pool = list(self.llm_pool)
        self.priority = list(self.priority)
        problems = self.problems()
        if problems:
            raise ValueError("invalid ensemble config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.llm_pool:
            out.append("llm_pool is empty")
        if len(set(self.llm_pool)) != len(self.llm_pool):
            out.append("llm_pool has duplicate names")
        if self.routing not in ROUTINGS:
            out.append(f"routing must be one of {ROUTINGS}")
        if self.ranker not in RANKERS:
            out.append(f"ranker must be one of {RANKERS}")
        if self.typed_backend is not None and self.typed_backend not in self.llm_pool:
            out.append("typed_backend must be a member of llm_pool")
        if self.qa_backend is not None and self.qa_backend in self.llm_pool:
            out.append("qa_backend must not be a member of llm_pool")
        if self.routing in ("hybrid", "baseline"):
            if self.qa_backend is None:
                out.append(f"{self.routing} routing requires qa_backend")
            if self.typed_backend is None:
                out.append(f"{self.routing} routing requires typed_backend")
        if self.routing == "hybrid" and self.ranker == "none":
            out.append("hybrid routing requires a ranker")
        if self.routing == "plain" and self.ranker == "none" and len(self.llm_pool) != 1:
            out.append("plain routing without a ranker requires a single-backend pool")
        if self.parallelism < 1:
            out.append("parallelism must be >= 1")
        return out

    @property
    def order(self) -> list[str]:
        names = list(self.priority)
        for n in [*self.llm_pool, *([self.qa_backend] if self.qa_backend else [])]:
            if n not in names:
                names.append(n)
        return names

    def referenced_backends(self) -> list[str]:
        names = self.order
        if self.question_backend and self.question_backend not in names:
            names.append(self.question_backend)
        return names

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnsembleConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SpoilerDecision:
    record_id: str
    chosen: Candidate
    pool: tuple[Candidate, ...]
    routing_used: str
    ranker: str = "none"
    scores: tuple[float, ...] | None = None
    question: str | None = None
    question_fallback: bool = False
    raw_outputs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.chosen not in self.pool:
            raise ValueError(f"record {self.record_id!r}: chosen candidate is not in the pool")

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "question": self.question,
            "question_fallback": self.question_fallback,
            "routing": self.routing_used,
            "ranker": self.ranker,
            "chosen": self.chosen.to_json(),
            "pool": [c.to_json() for c in self.pool],
            "scores": list(self.scores) if self.scores is not None else None,
            "raw_outputs": dict(sorted(self.raw_outputs.items())),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "SpoilerDecision":
        rid = d["record_id"]
        pool = tuple(Candidate(c["text"], c["backend"], rid) for c in d["pool"])
        chosen = Candidate(d["chosen"]["text"], d["chosen"]["backend"], rid)
        scores = tuple(d["scores"]) if d.get("scores") is not None else None
        return cls(
            rid, chosen, pool, d["routing"], d.get("ranker", "none"), scores,
            d.get("question"), bool(d.get("question_fallback", False)), dict(d.get("raw_outputs", {})),
        )


def dedupe(candidates: Iterable[Candidate]) -> list[Candidate]:
    """Drop empty texts and exact duplicates, keeping the first copy."""
    seen: set[str] = set()
    out = []
    for c in candidates:
        if not c.text or c.text in seen:
            continue
        seen.add(c.text)
        out.append(c)
    return out


class Pipeline:
    """Question conversion, candidate generation and selection over backends.

    Backend calls share one HTTP client; records may be processed in
    parallel (``config.parallelism``) but each record is handled
    sequentially and results keep dataset order.
    """

    def __init__(
        self,
        backends: Mapping[str, BackendSpec],
        config: EnsembleConfig,
        scorer: Scorer | None = None,
        *,
        typed_templates: Mapping[SpoilerType, PromptTemplate] | None = None,
        max_article_chars: int = DEFAULT_MAX_ARTICLE_CHARS,
        meta: RunMetadata | None = None,
    ) -> None:
        missing = [n for n in config.referenced_backends() if n not in backends]
        if missing:
            raise ValueError(f"ensemble references unknown backends {missing}")
        # a missing scorer is only an error once selection is attempted (see select)
        if scorer is not None and config.ranker != "none" and config.routing != "baseline":
            if scorer.flavor != config.ranker:
                raise ValueError(f"ranker is {config.ranker!r} but scorer is {scorer.flavor!r}")
        self.backends = dict(backends)
        self.config = config
        self.scorer = scorer
        self.typed_templates = typed_templates if typed_templates is not None else default_typed_templates()
        self.max_article_chars = max_article_chars
        self.meta = meta if meta is not None else RunMetadata()
        self._client = httpx.Client()

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "Pipeline":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    # -- building blocks --

    def ensure_question(self, record: ClickbaitRecord) -> tuple[ClickbaitRecord, bool]:
        if record.question:
            return record, False
        name = self.config.question_backend
        if name is None:
            raise ValueError(f"record {record.id!r} has no question and no question_backend is configured")
        before = len(self.meta.question_fallbacks)
        question = convert_to_question(self.backends[name], record.clickbait, self.meta, self._client, record.id)
        return record.with_question(question), len(self.meta.question_fallbacks) > before

    def prompt_for(self, backend_name: str, record: ClickbaitRecord) -> FilledPrompt:
        if not record.question:
            raise ValueError(f"record {record.id!r} has no question")
        kwargs = dict(record_id=record.id, max_article_chars=self.max_article_chars)
        if backend_name == self.config.typed_backend:
            return typed_spoiler_prompt(
                record.question, record.article, record.spoiler_type,
                templates=self.typed_templates, clickbait=record.clickbait, **kwargs,
            )
        return spoiler_prompt(record.question, record.article, record.spoiler_type, **kwargs)

    def _ordered(self, names: Iterable[str]) -> list[str]:
        wanted = set(names)
        return [n for n in self.config.order if n in wanted]

    def gather(self, record: ClickbaitRecord, names: Iterable[str]) -> tuple[list[Candidate], dict[str, str]]:
        """Query ``names`` in configured order; returns (pool, raw outputs).

        Unavailable backends are skipped (and counted in the run metadata)
        as long as at least one backend answered.
        """
        names = self._ordered(names)
        raw: dict[str, str] = {}
        candidates = []
        failures: list[BackendUnavailable] = []
        for name in names:
            try:
                cand = generate_candidate(
                    self.backends[name], self.prompt_for(name, record), record.id, self.meta, self._client
                )
            except BackendUnavailable as exc:
                log.warning("record %s: %s", record.id, exc)
                self.meta.record_unavailable(name)
                failures.append(exc)
                continue
            raw[name] = cand.text
            candidates.append(cand)
        if names and len(failures) == len(names):
            raise failures[-1]
        return dedupe(candidates), raw

    def pool_candidates(self, record: ClickbaitRecord, names: Iterable[str] | None = None) -> list[Candidate]:
        names = list(names) if names is not None else self.config.llm_pool
        pool, _ = self.gather(record, names)
        if not pool:
            raise NoCandidates(record.id, self._ordered(names))
        return pool

    def _routed(self, record: ClickbaitRecord) -> tuple[list[Candidate], dict[str, str], str]:
        cfg = self.config
        if cfg.routing == "plain":
            pool, raw = self.gather(record, cfg.llm_pool)
            used = "plain"
        elif record.spoiler_type is SpoilerType.MULTI:
            pool, raw = self.gather(record, cfg.llm_pool)
            used = "hybrid-multi"
        else:
            pool, raw = self.gather(record, [cfg.qa_backend, cfg.typed_backend])
            used = "hybrid-qa"
            if not pool:
                rest = [n for n in cfg.llm_pool if n != cfg.typed_backend]
                extra, extra_raw = self.gather(record, rest)
                pool, raw = extra, {**raw, **extra_raw}
                used = "hybrid-fallback"
        if not pool:
            raise NoCandidates(record.id, sorted(raw))
        return pool, raw, used

    def route_candidates(self, record: ClickbaitRecord) -> list[Candidate]:
        """Hybrid pool: LLM pool for multi-part, QA + typed backend otherwise."""
        if self.config.routing != "hybrid":
            raise ValueError("route_candidates requires hybrid routing")
        return self._routed(record)[0]

    def baseline_select(self, record: ClickbaitRecord) -> SpoilerDecision:
        """QA backend for phrase/passage, typed backend for multi; the other on empty."""
        cfg = self.config
        if cfg.routing != "baseline":
            raise ValueError("baseline_select requires baseline routing")
        if record.spoiler_type is SpoilerType.MULTI:
            first, second = cfg.typed_backend, cfg.qa_backend
        else:
            first, second = cfg.qa_backend, cfg.typed_backend
        pool, raw = self.gather(record, [first])
        used = "baseline"
        if not pool:
            pool, extra = self.gather(record, [second])
            raw.update(extra)
            used = "baseline-fallback"
        if not pool:
            raise NoCandidates(record.id, [first, second])
        return SpoilerDecision(record.id, pool[0], tuple(pool), used, "none", question=record.question,
                               raw_outputs=raw)

    def select(self, record: ClickbaitRecord, pool: Sequence[Candidate]) -> tuple[Candidate, tuple[float, ...] | None]:
        ranker = self.config.ranker
        if ranker == "none" or len(pool) == 1:
            return pool[0], None
        if self.scorer is None:
            raise ValueError(f"ranker {ranker!r} needs a scorer")
        if ranker == "pointwise":
            scores = pointwise_scores(self.scorer, pool, record)
            return pool[choose_by_scores(pool, scores, self.config.order)], tuple(scores)
        wins, pref = pairwise_tournament(self.scorer, pool, record)
        return pool[choose_by_tournament(pool, wins, pref, self.config.order)], tuple(wins)

    # -- per record / per dataset --

    def run_pipeline(self, record: ClickbaitRecord) -> SpoilerDecision:
        try:
            record, fell_back = self.ensure_question(record)
            if self.config.routing == "baseline":
                decision = self.baseline_select(record)
                return replace(decision, question_fallback=fell_back)
            pool, raw, used = self._routed(record)
            chosen, scores = self.select(record, pool)
            return SpoilerDecision(
                record.id, chosen, tuple(pool), used, self.config.ranker, scores,
                record.question, fell_back, raw,
            )
        except RecordError:
            raise
        except SpoilerGenError as exc:
            raise RecordError(record.id, exc) from exc

    def run(self, records: Dataset | Sequence[ClickbaitRecord]) -> list[SpoilerDecision]:
        records = list(records)
        if self.config.parallelism == 1:
            return [self.run_pipeline(r) for r in records]
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            return list(pool.map(self.run_pipeline, records))


def dumps_decision(decision: SpoilerDecision) -> str:
    return json.dumps(decision.to_json(), sort_keys=True, ensure_ascii=False)


def write_decisions(decisions: Iterable[SpoilerDecision], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(dumps_decision(d) + "\n")
            n += 1
    return n


def read_decisions(path) -> list[SpoilerDecision]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(SpoilerDecision.from_json(json.loads(line)))
    return out
