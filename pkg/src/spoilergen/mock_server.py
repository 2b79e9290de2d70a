"""Deterministic fixture-driven server speaking the backend wire protocol.

One server can impersonate several backends: a backend named ``qa`` is
reached at ``http://host:port/qa`` (so ``/qa/v1/completions``). Fixture
format (JSON)::

    {
      "completions": [
        {"backend": "qa", "match": "moon", "response": "NASA"},
        {"match": "Sentence: (.*)\\n", "response_template": "What about \\\\1?"}
      ],
      "embeddings": {"dim": 16, "seed": 42, "vectors": {"nasa": [1, 0, ...]}},
      "scores": [{"backend": "s", "candidate_a": "NASA", "score": 0.9}],
      "failures": {"flaky": 2}
    }

Completion rules are tried in order; ``match`` is a regex searched in the
prompt and ``backend`` (optional) restricts the rule to one path prefix.
Unmatched prompts get the last prompt line echoed back. Stop sequences are
*not* applied server side. ``failures`` makes the first N requests to a
backend answer HTTP 503. Token vectors are seeded pseudo-random unit
vectors unless overridden.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np

from .metrics import tokenize

ENDPOINTS = ("/v1/completions", "/v1/token_embeddings", "/v1/score")


@dataclass
class _Rule:
    pattern: re.Pattern
    backend: str | None
    response: str
    template: bool


@dataclass
class _ScoreRule:
    backend: str | None
    cand_a: re.Pattern | None
    cand_b: re.Pattern | None
    score: float


@dataclass
class Fixture:
    completions: list[_Rule] = field(default_factory=list)
    scores: list[_ScoreRule] = field(default_factory=list)
    dim: int = 16
    seed: int = 42
    vectors: dict[str, list[float]] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Fixture":
        rules = []
        for i, r in enumerate(raw.get("completions", [])):
            if "response" in r:
                response, template = r["response"], False
            elif "response_template" in r:
                response, template = r["response_template"], True
            else:
                raise ValueError(f"completion rule {i} needs 'response' or 'response_template'")
            rules.append(_Rule(re.compile(r.get("match", "")), r.get("backend"), response, template))
        scores = [
            _ScoreRule(
                s.get("backend"),
                re.compile(s["candidate_a"]) if "candidate_a" in s else None,
                re.compile(s["candidate_b"]) if "candidate_b" in s else None,
                float(s["score"]),
            )
            for s in raw.get("scores", [])
        ]
        emb = raw.get("embeddings", {})
        vectors = {k: [float(x) for x in v] for k, v in emb.get("vectors", {}).items()}
        dim = int(emb.get("dim", len(next(iter(vectors.values()))) if vectors else 16))
        for tok, vec in vectors.items():
            if len(vec) != dim:
                raise ValueError(f"override vector for {tok!r} has dim {len(vec)}, expected {dim}")
        return cls(rules, scores, dim, int(emb.get("seed", 42)), vectors, dict(raw.get("failures", {})))

    @classmethod
    def load(cls, path: str | Path) -> "Fixture":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def complete(self, backend: str | None, prompt: str) -> str:
        for rule in self.completions:
            if rule.backend is not None and rule.backend != backend:
                continue
            m = rule.pattern.search(prompt)
            if m:
                return m.expand(rule.response) if rule.template else rule.response
        return prompt.rstrip("\n").rsplit("\n", 1)[-1]

    def vector(self, token: str) -> list[float]:
        if token in self.vectors:
            return self.vectors[token]
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).tolist()

    def score(self, backend: str | None, cand_a: str, cand_b: str | None) -> float:
        for rule in self.scores:
            if rule.backend is not None and rule.backend != backend:
                continue
            if rule.cand_a is not None and not rule.cand_a.search(cand_a):
                continue
            if rule.cand_b is not None and (cand_b is None or not rule.cand_b.search(cand_b)):
                continue
            return rule.score
        return 0.5 if cand_b is not None else 0.0


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass

    def do_POST(self) -> None:  # noqa: N802
        backend, endpoint = _split_path(self.path)
        if endpoint is None:
            return self._send(404, {"error": f"unknown path {self.path}"})
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            return self._send(400, {"error": "malformed JSON body"})
        mock = self.server.mock
        if mock.take_failure(backend):
            return self._send(503, {"error": "scripted failure"})
        mock.log_request(backend, endpoint, body)
        fixture = mock.fixture
        if endpoint == "/v1/completions":
            prompt = body.get("prompt")
            if not isinstance(prompt, str):
                return self._send(400, {"error": "prompt must be a string"})
            return self._send(200, {"choices": [{"text": fixture.complete(backend, prompt), "index": 0}]})
        if endpoint == "/v1/token_embeddings":
            tokens = tokenize(str(body.get("text", "")))
            return self._send(200, {"tokens": tokens, "vectors": [fixture.vector(t) for t in tokens]})
        score = fixture.score(backend, str(body.get("candidate_a", "")), body.get("candidate_b"))
        return self._send(200, {"score": score})

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def _split_path(path: str) -> tuple[str | None, str | None]:
    path = path.split("?", 1)[0]
    for ep in ENDPOINTS:
        if path.endswith(ep):
            prefix = path[: -len(ep)].strip("/")
            return (prefix or None), ep
    return None, None


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    mock: "MockServer"


class MockServer:
    """Run a fixture on ``127.0.0.1``; usable as a context manager.

    ``port=0`` picks a free port. ``requests`` keeps every served request
    as ``(backend, endpoint, body)`` in arrival order.
    """

    def __init__(self, fixture: Fixture | dict | str | Path, host: str = "127.0.0.1", port: int = 0):
        if isinstance(fixture, dict):
            fixture = Fixture.from_dict(fixture)
        elif not isinstance(fixture, Fixture):
            fixture = Fixture.load(fixture)
        self.fixture = fixture
        self.requests: list[tuple[str | None, str, dict]] = []
        self._remaining_failures = dict(fixture.failures)
        self._lock = threading.Lock()
        self._httpd = _Server((host, port), _Handler)
        self._httpd.mock = self
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def base_url(self, backend: str) -> str:
        return f"{self.url}/{backend}"

    def log_request(self, backend: str | None, endpoint: str, body: dict) -> None:
        with self._lock:
            self.requests.append((backend, endpoint, body))

    def take_failure(self, backend: str | None) -> bool:
        with self._lock:
            left = self._remaining_failures.get(backend or "", 0)
            if left > 0:
                self._remaining_failures[backend or ""] = left - 1
                return True
            return False

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()
