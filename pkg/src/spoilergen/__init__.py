"""Clickbait spoiler generation: LLM candidate pooling with learned reranking."""

from .corpus import ClickbaitRecord, Dataset, SpoilerType, load_dataset, normalize_spoiler, validate_record
from .ensemble import EnsembleConfig, Pipeline, SpoilerDecision
from .harness import EvalReport, evaluate, render_report

__version__ = "0.1.0"

__all__ = [
    "ClickbaitRecord",
    "Dataset",
    "EnsembleConfig",
    "EvalReport",
    "Pipeline",
    "SpoilerDecision",
    "SpoilerType",
    "evaluate",
    "load_dataset",
    "normalize_spoiler",
    "render_report",
    "validate_record",
]
