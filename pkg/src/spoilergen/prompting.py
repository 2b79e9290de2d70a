"""Prompt templates for question conversion and spoiler generation.

Fine-tuning export: each record becomes the spoiler template filled with the
gold spoiler. The external fine-tuning job is expected to minimise the usual
causal language-modelling cross-entropy over the tokens of that text; nothing
here computes a loss.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .corpus import Dataset, SpoilerType
from .errors import DataError

PLACEHOLDERS = frozenset({"clickbait", "question", "article", "type", "spoiler"})
DEFAULT_MAX_ARTICLE_CHARS = 6000

QUESTION_TEMPLATE_BODY = (
    "Below is a sentence from which write a question.\nSentence: {clickbait}\nQuestion:"
)
_SPOILER_HEAD = (
    "Below is a question paired with a context for which you should generate an answer. "
    "Write an answer with type {type} that appropriately completes the question."
)
_SPOILER_TAIL = "\nQuestion: {question}\nContext: {article}\nAnswer:"
SPOILER_TEMPLATE_BODY = _SPOILER_HEAD + _SPOILER_TAIL

DEFAULT_TYPED_TEMPLATES_PATH = resources.files("spoilergen") / "data" / "typed_prompts.json"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def __post_init__(self) -> None:
        unknown = self.placeholders() - PLACEHOLDERS
        if unknown:
            raise DataError(
                f"template {self.name!r} uses unknown placeholder(s) {sorted(unknown)}"
            )

    def placeholders(self) -> set[str]:
        try:
            parsed = list(string.Formatter().parse(self.body))
        except ValueError as exc:
            raise DataError(f"template {self.name!r} is malformed: {exc}") from None
        names = set()
        for _, field_name, spec, conversion in parsed:
            if field_name is None:
                continue
            if spec or conversion or not field_name.isidentifier():
                raise DataError(f"template {self.name!r}: unsupported placeholder {field_name!r}")
            names.add(field_name)
        return names

    def render(self, **values: str) -> str:
        missing = self.placeholders() - values.keys()
        if missing:
            raise ValueError(f"template {self.name!r}: unbound placeholder(s) {sorted(missing)}")
        # format_map only interprets braces in the body, never in the values
        return self.body.format_map(values)


@dataclass(frozen=True)
class FilledPrompt:
    text: str
    template_name: str
    record_id: str = ""

    @property
    def is_inference(self) -> bool:
        return self.text.endswith("Answer:")

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "text": self.text}


QUESTION_TEMPLATE = PromptTemplate("question", QUESTION_TEMPLATE_BODY)
SPOILER_TEMPLATE = PromptTemplate("spoiler", SPOILER_TEMPLATE_BODY)


def default_typed_templates() -> dict[SpoilerType, PromptTemplate]:
    """The packaged per-type templates (``data/typed_prompts.json``)."""
    return load_typed_templates(DEFAULT_TYPED_TEMPLATES_PATH)


def load_typed_templates(path: str | Path) -> dict[SpoilerType, PromptTemplate]:
    """Load per-type templates from a JSON object ``{"phrase": body, ...}``.

    Keys that are not spoiler types are rejected; types may be left out, in
    which case asking for them later raises.
    """
    source = Path(path) if isinstance(path, str) else path
    try:
        raw = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed template config ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}: template config must be a JSON object")
    templates = {}
    for key, body in raw.items():
        spoiler_type = SpoilerType.parse(key)
        if not isinstance(body, str):
            raise DataError(f"{path}: template {key!r} must be a string")
        templates[spoiler_type] = PromptTemplate(f"typed-{spoiler_type.value}", body)
    return templates


def truncate_article(article: str, max_chars: int = DEFAULT_MAX_ARTICLE_CHARS) -> str:
    if max_chars <= 0:
        raise ValueError("max_chars must be positive")
    return article[:max_chars]


def question_prompt(clickbait: str, record_id: str = "") -> FilledPrompt:
    if not clickbait or not clickbait.strip():
        raise ValueError("clickbait must be non-empty")
    return FilledPrompt(QUESTION_TEMPLATE.render(clickbait=clickbait), QUESTION_TEMPLATE.name, record_id)


def _fill(
    template: PromptTemplate,
    question: str,
    article: str,
    spoiler_type: SpoilerType,
    spoiler: str | None,
    record_id: str,
    max_article_chars: int,
    clickbait: str | None = None,
) -> FilledPrompt:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    if not article or not article.strip():
        raise ValueError("article must be non-empty")
    values = {
        "question": question,
        "article": truncate_article(article, max_article_chars),
        "type": spoiler_type.value,
        "clickbait": clickbait or question,
        "spoiler": spoiler or "",
    }
    text = template.render(**values)
    if spoiler is not None:
        # training form: one space after "Answer:" and a closing newline
        text = f"{text} {spoiler}\n"
    return FilledPrompt(text, template.name, record_id)


def spoiler_prompt(
    question: str,
    article: str,
    spoiler_type: SpoilerType,
    spoiler: str | None = None,
    *,
    record_id: str = "",
    max_article_chars: int = DEFAULT_MAX_ARTICLE_CHARS,
) -> FilledPrompt:
    return _fill(SPOILER_TEMPLATE, question, article, spoiler_type, spoiler, record_id, max_article_chars)


def typed_spoiler_prompt(
    question: str,
    article: str,
    spoiler_type: SpoilerType,
    spoiler: str | None = None,
    *,
    templates: Mapping[SpoilerType, PromptTemplate] | None = None,
    record_id: str = "",
    max_article_chars: int = DEFAULT_MAX_ARTICLE_CHARS,
    clickbait: str | None = None,
) -> FilledPrompt:
    """Spoiler prompt using the per-type template for ``spoiler_type``.

    ``clickbait`` only matters for custom templates that reference
    ``{clickbait}``; it defaults to the question.
    """
    if templates is None:
        templates = default_typed_templates()
    try:
        template = templates[spoiler_type]
    except KeyError:
        raise DataError(f"no typed template configured for spoiler type {spoiler_type.value!r}") from None
    return _fill(
        template, question, article, spoiler_type, spoiler, record_id, max_article_chars, clickbait
    )


def build_finetune_corpus(
    dataset: Dataset,
    template_mode: str = "general",
    *,
    templates: Mapping[SpoilerType, PromptTemplate] | None = None,
    max_article_chars: int = DEFAULT_MAX_ARTICLE_CHARS,
) -> list[FilledPrompt]:
    """Training-form prompts (gold spoiler appended), one per record, in dataset order."""
    if template_mode not in ("general", "typed"):
        raise ValueError(f"template_mode must be 'general' or 'typed', got {template_mode!r}")
    unconverted = [r.id for r in dataset if not r.question]
    if unconverted:
        raise DataError(f"records without a converted question: {unconverted}")
    unlabeled = [r.id for r in dataset if not r.has_gold]
    if unlabeled:
        raise DataError(f"records without a gold spoiler: {unlabeled}")

    out = []
    for rec in dataset:
        kwargs = dict(record_id=rec.id, max_article_chars=max_article_chars)
        if template_mode == "typed":
            prompt = typed_spoiler_prompt(
                rec.question, rec.article, rec.spoiler_type, rec.spoiler,
                templates=templates, clickbait=rec.clickbait, **kwargs,
            )
        else:
            prompt = spoiler_prompt(rec.question, rec.article, rec.spoiler_type, rec.spoiler, **kwargs)
        out.append(prompt)
    return out


def write_jsonl(prompts: Iterable[FilledPrompt], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n
