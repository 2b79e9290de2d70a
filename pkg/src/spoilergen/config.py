"""Run configuration file (JSON).

Example::

    {
      "seed": 42,
      "datasets": {"train": "data/train.jsonl", "validation": "data/val.jsonl"},
      "backends": [
        {"name": "llama", "base_url": "http://localhost:8001", "kind": "completion"},
        {"name": "embedder", "base_url": "http://localhost:8004", "kind": "embedding"}
      ],
      "ensemble": {"llm_pool": ["llama", "vicuna", "vicuna-typed"],
                   "typed_backend": "vicuna-typed", "qa_backend": "deberta-q",
                   "question_backend": "vicuna", "routing": "hybrid",
                   "ranker": "pointwise", "parallelism": 4},
      "scorers": {"pointwise": "models/pointwise.json"},
      "remote_scorer": null,
      "prompts": {"typed_templates": null, "max_article_chars": 6000},
      "metrics": {"embedder": "embedder"},
      "trainer": {"learning_rate": 0.1, "epochs": 500},
      "output_dir": "runs/default"
    }

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backend import BackendSpec
from .ensemble import EnsembleConfig
from .errors import DataError
from .ranking import TrainerConfig


@dataclass
class RunConfig:
    seed: int
    datasets: dict[str, Path]
    backends: dict[str, BackendSpec]
    ensemble: EnsembleConfig
    output_dir: Path
    scorers: dict[str, Path] = field(default_factory=dict)
    remote_scorer: str | None = None
    typed_templates: Path | None = None
    max_article_chars: int = 6000
    embedder: str | None = None
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)
        if "seed" not in raw:
            raise DataError("config: 'seed' is mandatory")

        def resolve(p: str | None) -> Path | None:
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        backends = {}
        for b in raw.get("backends", []):
            try:
                spec = BackendSpec.from_dict(b)
            except (TypeError, ValueError) as exc:
                raise DataError(f"config: bad backend entry {b!r}: {exc}") from None
            if spec.name in backends:
                raise DataError(f"config: duplicate backend name {spec.name!r}")
            backends[spec.name] = spec

        try:
            ensemble = EnsembleConfig.from_dict(raw.get("ensemble", {}))
        except TypeError as exc:
            raise DataError(f"config: bad ensemble section: {exc}") from None
        prompts = raw.get("prompts", {})
        trainer = TrainerConfig.from_dict({"seed": raw["seed"], **raw.get("trainer", {})})
        cfg = cls(
            seed=int(raw["seed"]),
            datasets={k: resolve(v) for k, v in raw.get("datasets", {}).items()},
            backends=backends,
            ensemble=ensemble,
            output_dir=resolve(raw.get("output_dir", "runs")),
            scorers={k: resolve(v) for k, v in raw.get("scorers", {}).items()},
            remote_scorer=raw.get("remote_scorer"),
            typed_templates=resolve(prompts.get("typed_templates")),
            max_article_chars=int(prompts.get("max_article_chars", 6000)),
            embedder=raw.get("metrics", {}).get("embedder"),
            trainer=trainer,
            raw=copy.deepcopy(raw),
            base_dir=base,
        )
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
        return cls.from_dict(raw, path.parent)

    def check(self) -> None:
        missing = [n for n in self.ensemble.referenced_backends() if n not in self.backends]
        for name in (self.embedder, self.remote_scorer):
            if name is not None and name not in self.backends:
                missing.append(name)
        if missing:
            raise DataError(f"config references undefined backends {missing}")
        if self.embedder and self.backends[self.embedder].kind != "embedding":
            raise DataError(f"metrics.embedder {self.embedder!r} is not an embedding backend")
        files = list(self.datasets.values())
        if self.typed_templates is not None:
            files.append(self.typed_templates)
        absent = [str(p) for p in files if not p.exists()]
        if absent:
            raise DataError(f"config references missing files: {absent}")

    def dataset_path(self, split: str) -> Path:
        try:
            return self.datasets[split]
        except KeyError:
            raise DataError(f"config has no dataset for split {split!r}") from None

    def with_overrides(self, routing: str | None = None, ranker: str | None = None, seed: int | None = None) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        if routing is not None:
            raw.setdefault("ensemble", {})["routing"] = routing
        if ranker is not None:
            raw.setdefault("ensemble", {})["ranker"] = ranker
        if seed is not None:
            raw["seed"] = seed
            raw.setdefault("trainer", {}).pop("seed", None)
        return RunConfig.from_dict(raw, self.base_dir)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    def out(self, name: str) -> Path:
        return self.output_dir / name
