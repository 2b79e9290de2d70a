"""HTTP clients for completion, token-embedding and scoring services.

Wire protocol (JSON over HTTP POST):

* ``<base_url>/v1/completions``: ``{prompt, max_tokens, stop, temperature: 0}``
  answered by ``{"choices": [{"text": ...}]}``
* ``<base_url>/v1/token_embeddings``: ``{text}`` answered by
  ``{"tokens": [...], "vectors": [[...], ...]}``
* ``<base_url>/v1/score``: ``{question, candidate_a, candidate_b?, article}``
  answered by ``{"score": float}``

Every completion request is greedy (``temperature`` 0). Stop sequences are
also applied client side, so servers that ignore ``stop`` are fine.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import httpx
import numpy as np

from .errors import BackendUnavailable, EmptyCompletion, ProtocolError
from .prompting import FilledPrompt, question_prompt

log = logging.getLogger(__name__)

QUESTION_STOP = ("\n",)
# no bare "\n": multi-part spoilers span several lines
SPOILER_STOP = ("\nQuestion:", "\nContext:")

KINDS = ("completion", "embedding", "score")


@dataclass(frozen=True)
class BackendSpec:
    name: str
    base_url: str
    kind: str = "completion"
    max_tokens: int = 256
    timeout: float = 120.0
    retry_limit: int = 3
    backoff: float = 1.0
    model: str | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("backend name must be non-empty")
        if self.kind not in KINDS:
            raise ValueError(f"backend {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.max_tokens < 1:
            raise ValueError(f"backend {self.name!r}: max_tokens must be >= 1")
        if self.retry_limit < 0:
            raise ValueError(f"backend {self.name!r}: retry_limit must be >= 0")

    def url(self, path: str) -> str:
        return self.base_url.rstrip("/") + path

    @classmethod
    def from_dict(cls, d: dict) -> "BackendSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class Candidate:
    text: str
    backend_name: str
    record_id: str

    def to_json(self) -> dict:
        return {"backend": self.backend_name, "text": self.text}


@dataclass
class RunMetadata:
    """Thread-safe counters collected while talking to backends."""

    retries: Counter = field(default_factory=Counter)
    calls: Counter = field(default_factory=Counter)
    question_fallbacks: list[str] = field(default_factory=list)
    unavailable: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_call(self, backend: str, retries: int) -> None:
        with self._lock:
            self.calls[backend] += 1
            self.retries[backend] += retries

    def record_fallback(self, key: str) -> None:
        with self._lock:
            self.question_fallbacks.append(key)

    def record_unavailable(self, backend: str) -> None:
        with self._lock:
            self.unavailable[backend] += 1

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "calls": dict(sorted(self.calls.items())),
                "retries": dict(sorted(self.retries.items())),
                "question_fallbacks": len(self.question_fallbacks),
                "unavailable": dict(sorted(self.unavailable.items())),
            }


def post_json(
    spec: BackendSpec,
    path: str,
    payload: dict,
    meta: RunMetadata | None = None,
    client: httpx.Client | None = None,
) -> dict:
    """POST with retries on transport errors and 5xx answers.

    ``spec.retry_limit`` counts retries, so at most ``retry_limit + 1``
    attempts are made. Backoff doubles from ``spec.backoff`` seconds.
    """
    url = spec.url(path)
    attempt = 0
    while True:
        try:
            if client is not None:
                resp = client.post(url, json=payload, timeout=spec.timeout)
            else:
                resp = httpx.post(url, json=payload, timeout=spec.timeout)
            if resp.status_code >= 500:
                raise httpx.HTTPStatusError(
                    f"server error {resp.status_code}", request=resp.request, response=resp
                )
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            if attempt >= spec.retry_limit:
                if meta is not None:
                    meta.record_call(spec.name, attempt)
                raise BackendUnavailable(spec.name, attempt + 1, exc) from exc
            delay = spec.backoff * (2**attempt)
            log.warning("%s: %s (retry %d/%d in %.2fs)", spec.name, exc, attempt + 1, spec.retry_limit, delay)
            time.sleep(delay)
            attempt += 1
            continue
        break

    if meta is not None:
        meta.record_call(spec.name, attempt)
    if resp.status_code >= 400:
        raise ProtocolError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}", spec.name)
    try:
        body = resp.json()
    except ValueError:
        raise ProtocolError(f"{url} answered non-JSON body", spec.name) from None
    if not isinstance(body, dict):
        raise ProtocolError(f"{url} answered {type(body).__name__}, expected object", spec.name)
    return body


def truncate_at_stop(text: str, stop: Sequence[str]) -> str:
    """Cut ``text`` at the earliest occurrence of any stop sequence."""
    cut = len(text)
    for s in stop:
        if not s:
            continue
        pos = text.find(s)
        if pos != -1 and pos < cut:
            cut = pos
    return text[:cut]


def complete_greedy(
    spec: BackendSpec,
    prompt: str,
    stop: Sequence[str],
    meta: RunMetadata | None = None,
    client: httpx.Client | None = None,
) -> str:
    if spec.kind != "completion":
        raise ValueError(f"backend {spec.name!r} is not a completion backend")
    if not prompt:
        raise ValueError("prompt must be non-empty")
    payload = {
        "prompt": prompt,
        "max_tokens": spec.max_tokens,
        "stop": list(stop),
        "temperature": 0,
    }
    if spec.model:
        payload["model"] = spec.model
    body = post_json(spec, "/v1/completions", payload, meta, client)
    try:
        raw = body["choices"][0]["text"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError(f"{spec.name}: response lacks choices[0].text", spec.name) from None
    if not isinstance(raw, str):
        raise ProtocolError(f"{spec.name}: choices[0].text is not a string", spec.name)
    text = truncate_at_stop(raw, stop).strip()
    if not text:
        raise EmptyCompletion(spec.name)
    return text


def convert_to_question(
    spec: BackendSpec,
    clickbait: str,
    meta: RunMetadata | None = None,
    client: httpx.Client | None = None,
    record_id: str = "",
) -> str:
    """Rewrite a clickbait as a question; falls back to the clickbait itself.

    Fallbacks are recorded in ``meta.question_fallbacks`` (keyed by
    ``record_id`` or the clickbait when no id is given).
    """
    prompt = question_prompt(clickbait, record_id)
    try:
        return complete_greedy(spec, prompt.text, QUESTION_STOP, meta, client)
    except EmptyCompletion:
        if meta is not None:
            meta.record_fallback(record_id or clickbait)
        return clickbait


def generate_candidate(
    spec: BackendSpec,
    prompt: FilledPrompt,
    record_id: str,
    meta: RunMetadata | None = None,
    client: httpx.Client | None = None,
) -> Candidate:
    if not prompt.is_inference:
        raise ValueError("generate_candidate needs an inference prompt ending with 'Answer:'")
    try:
        text = complete_greedy(spec, prompt.text, SPOILER_STOP, meta, client)
    except EmptyCompletion:
        text = ""
    return Candidate(text, spec.name, record_id)


def embed_tokens(
    spec: BackendSpec,
    text: str,
    client: httpx.Client | None = None,
) -> list[tuple[str, list[float]]]:
    """Per-token vectors as returned by the embedding service."""
    if spec.kind != "embedding":
        raise ValueError(f"backend {spec.name!r} is not an embedding backend")
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    body = post_json(spec, "/v1/token_embeddings", {"text": text}, client=client)
    tokens = body.get("tokens")
    vectors = body.get("vectors")
    if not isinstance(tokens, list) or not isinstance(vectors, list):
        raise ProtocolError(f"{spec.name}: response lacks tokens/vectors lists", spec.name)
    if len(tokens) != len(vectors):
        raise ProtocolError(
            f"{spec.name}: {len(tokens)} tokens but {len(vectors)} vectors", spec.name
        )
    dims = {len(v) for v in vectors}
    if len(dims) > 1 or 0 in dims:
        raise ProtocolError(f"{spec.name}: inconsistent embedding dimensions {sorted(dims)}", spec.name)
    return [(str(t), [float(x) for x in v]) for t, v in zip(tokens, vectors)]


def embed_token_list(spec: BackendSpec, tokens: Sequence[str]) -> np.ndarray:
    """Embed an already tokenized sequence; the service must agree on the tokens."""
    pairs = embed_tokens(spec, " ".join(tokens))
    got = [t for t, _ in pairs]
    if got != list(tokens):
        raise ProtocolError(
            f"{spec.name}: service tokenized {got[:10]} but metric tokens are {list(tokens)[:10]}",
            spec.name,
        )
    return np.array([v for _, v in pairs], dtype=np.float64)


def remote_score(
    spec: BackendSpec,
    question: str,
    article: str,
    candidate_a: str,
    candidate_b: str | None = None,
    meta: RunMetadata | None = None,
    client: httpx.Client | None = None,
) -> float:
    payload = {"question": question, "candidate_a": candidate_a, "article": article}
    if candidate_b is not None:
        payload["candidate_b"] = candidate_b
    body = post_json(spec, "/v1/score", payload, meta, client)
    score = body.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise ProtocolError(f"{spec.name}: response lacks numeric 'score'", spec.name)
    return float(score)
