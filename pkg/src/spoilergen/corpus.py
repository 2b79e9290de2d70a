"""Webis-Clickbait-22 style corpus loading and validation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError

REQUIRED_FIELDS = ("postText", "targetParagraphs", "spoiler", "tags", "uuid")


class SpoilerType(enum.Enum):
    PHRASE = "phrase"
    PASSAGE = "passage"
    MULTI = "multi"

    @classmethod
    def parse(cls, tag: str) -> "SpoilerType":
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            raise DataError(f"unknown spoiler type tag {tag!r}") from None

    def __str__(self) -> str:
        return self.value


def normalize_spoiler(parts: Iterable[str]) -> str:
    """Canonical single-string form of a (possibly multi-part) spoiler.

    Parts are trimmed and joined with ``"\\n"``.
    """
    parts = list(parts)
    if not parts:
        raise DataError("spoiler has no parts")
    trimmed = [p.strip() for p in parts]
    if any(not p for p in trimmed):
        raise DataError("spoiler contains an empty or whitespace-only part")
    return "\n".join(trimmed)


@dataclass(frozen=True)
class ClickbaitRecord:
    id: str
    clickbait: str
    article: str
    spoiler_parts: tuple[str, ...]
    spoiler: str
    spoiler_type: SpoilerType
    question: str | None = None

    @property
    def has_gold(self) -> bool:
        return bool(self.spoiler_parts)

    def with_question(self, question: str) -> "ClickbaitRecord":
        return replace(self, question=question)


def validate_record(record: ClickbaitRecord) -> list[str]:
    """Return the invariants ``record`` violates; an empty list means valid."""
    problems = []
    if not record.id:
        problems.append("id empty")
    if not record.clickbait.strip():
        problems.append("clickbait empty")
    if not record.article.strip():
        problems.append("article empty")
    if not record.spoiler_parts:
        # unlabeled records are allowed, but then there must be no spoiler either
        if record.spoiler:
            problems.append("spoiler not normalized")
        return problems
    try:
        expected = normalize_spoiler(record.spoiler_parts)
    except DataError:
        problems.append("spoiler_parts contain empty part")
    else:
        if record.spoiler != expected:
            problems.append("spoiler not normalized")
    return problems


@dataclass(frozen=True)
class Dataset:
    records: tuple[ClickbaitRecord, ...]
    split_name: str
    # human-readable notes about lossy ingestion (e.g. extra postText entries)
    load_notes: tuple[str, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, ClickbaitRecord] = {}
        for rec in self.records:
            if rec.id in index:
                raise DataError(f"duplicate record id {rec.id!r} in split {self.split_name!r}")
            index[rec.id] = rec
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ClickbaitRecord]:
        return iter(self.records)

    def __contains__(self, record_id: object) -> bool:
        return record_id in self._index

    def get(self, record_id: str) -> ClickbaitRecord:
        try:
            return self._index[record_id]
        except KeyError:
            raise DataError(f"record id {record_id!r} not in split {self.split_name!r}") from None

    def with_questions(self, questions: dict[str, str]) -> "Dataset":
        """Copy of the dataset with ``question`` filled from ``questions`` (by id)."""
        records = tuple(
            r.with_question(questions[r.id]) if r.id in questions else r for r in self.records
        )
        return Dataset(records, self.split_name, self.load_notes)


def _parse_line(obj: object, lineno: int) -> tuple[ClickbaitRecord, str | None]:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for name in REQUIRED_FIELDS:
        if name not in obj:
            raise DataError(f"line {lineno}: missing required field {name!r}")

    post_text = obj["postText"]
    if not isinstance(post_text, list) or not post_text:
        raise DataError(f"line {lineno}: field 'postText' must be a non-empty list")
    paragraphs = obj["targetParagraphs"]
    if not isinstance(paragraphs, list):
        raise DataError(f"line {lineno}: field 'targetParagraphs' must be a list")
    tags = obj["tags"]
    if not isinstance(tags, list) or not tags:
        raise DataError(f"line {lineno}: field 'tags' must be a non-empty list")
    spoiler = obj["spoiler"]
    if not isinstance(spoiler, list):
        raise DataError(f"line {lineno}: field 'spoiler' must be a list")

    try:
        spoiler_type = SpoilerType.parse(tags[0])
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None

    if spoiler:
        try:
            normalized = normalize_spoiler(spoiler)
        except DataError as exc:
            raise DataError(f"line {lineno}: field 'spoiler': {exc}") from None
        parts = tuple(p.strip() for p in spoiler)
    else:
        normalized, parts = "", ()

    note = None
    if len(post_text) > 1:
        note = f"line {lineno}: kept first of {len(post_text)} postText entries"

    record = ClickbaitRecord(
        id=str(obj["uuid"]),
        clickbait=str(post_text[0]),
        article="\n".join(str(p) for p in paragraphs),
        spoiler_parts=parts,
        spoiler=normalized,
        spoiler_type=spoiler_type,
    )
    return record, note


def load_dataset(path: str | Path, split_name: str) -> Dataset:
    """Read a JSON-lines corpus file; blank lines are skipped."""
    records = []
    notes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            record, note = _parse_line(obj, lineno)
            records.append(record)
            if note:
                notes.append(note)
    return Dataset(tuple(records), split_name, tuple(notes))


def record_to_json(record: ClickbaitRecord) -> dict:
    """Inverse of the loader's field mapping (paragraph structure is lost)."""
    return {
        "uuid": record.id,
        "postText": [record.clickbait],
        "targetParagraphs": record.article.split("\n"),
        "spoiler": list(record.spoiler_parts),
        "tags": [record.spoiler_type.value],
    }
