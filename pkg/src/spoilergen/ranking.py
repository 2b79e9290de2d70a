"""Learning-to-rank over spoiler candidates.

Training data comes from running the generators on labelled records and
scoring each candidate by sentence BLEU against the gold spoiler. Two
flavours of linear scorer are trained by full-batch gradient descent:

* pointwise: regress BLEU from a candidate's feature vector (squared error)
* pairwise: logistic classifier on ``[f_a, f_b, f_a - f_b]`` predicting
  whether candidate *a* has the higher BLEU (binary cross-entropy)

Any object with ``flavor`` and ``score``/``prefer`` methods can stand in for
the built-in scorer; :class:`RemoteScorer` forwards to a ``/v1/score``
service and :class:`OracleScorer` peeks at the gold spoiler.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .backend import BackendSpec, Candidate, RunMetadata, remote_score
from .corpus import ClickbaitRecord, SpoilerType
from .errors import DataError
from .metrics import clipped_ngram_stats, sentence_bleu, tokenize

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "article_unigram_overlap",
    "article_bigram_overlap",
    "question_unigram_overlap",
    "length_tokens_div50",
    "length_ratio_to_article",
    "first_trigram_position",
    "parts_div10",
    "type_phrase",
    "type_passage",
    "type_multi",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_SCHEMA = hashlib.sha256("|".join(FEATURE_NAMES).encode()).hexdigest()[:16]
MODEL_FORMAT = "spoilergen-scorer"
MODEL_VERSION = 1

Pool = tuple[ClickbaitRecord, Sequence[Candidate]]


# --- features ---------------------------------------------------------------


def _overlap(tokens: Sequence, reference: set) -> float:
    if not tokens:
        return 0.0
    return sum(1 for t in tokens if t in reference) / len(tokens)


def _bigrams(tokens: Sequence[str]) -> list[tuple[str, str]]:
    return list(zip(tokens, tokens[1:]))


def _first_position(needle: Sequence[str], haystack: Sequence[str]) -> int | None:
    k = len(needle)
    for i in range(len(haystack) - k + 1):
        if list(haystack[i : i + k]) == list(needle):
            return i
    return None


def extract_features(question: str, candidate: str, article: str, spoiler_type: SpoilerType) -> np.ndarray:
    """Fixed 10-dimensional description of (question, candidate, article, type).

    Single-token candidates have no bigrams; their bigram overlap repeats the
    unigram overlap. The position feature looks for the first three candidate
    tokens (fewer if the candidate is shorter) and is 1.0 when absent.
    """
    if not candidate or not candidate.strip():
        raise ValueError("candidate must be non-empty")
    cand = tokenize(candidate)
    art = tokenize(article)
    ques = tokenize(question)

    uni = _overlap(cand, set(art))
    cand_bi = _bigrams(cand)
    bi = _overlap(cand_bi, set(_bigrams(art))) if cand_bi else uni
    q_uni = _overlap(cand, set(ques))
    length = len(cand) / 50.0
    ratio = len(cand) / len(art) if art else 0.0
    pos = _first_position(cand[:3], art) if cand else None
    position = 1.0 if pos is None else pos / max(len(art), 1)
    parts = len([p for p in candidate.split("\n") if p.strip()]) / 10.0
    onehot = [1.0 if spoiler_type is t else 0.0 for t in (SpoilerType.PHRASE, SpoilerType.PASSAGE, SpoilerType.MULTI)]
    return np.array([uni, bi, q_uni, length, ratio, position, parts, *onehot], dtype=np.float64)


def record_features(record: ClickbaitRecord, text: str) -> np.ndarray:
    return extract_features(record.question or record.clickbait, text, record.article, record.spoiler_type)


def pair_input(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    return np.concatenate([fa, fb, fa - fb], axis=-1)


# --- training data ----------------------------------------------------------


@dataclass(frozen=True)
class PointwiseExample:
    features: np.ndarray
    target: float
    record_id: str = ""
    text: str = ""

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "text": self.text,
            "features": self.features.tolist(),
            "target": self.target,
        }


@dataclass(frozen=True)
class PairwiseExample:
    features_a: np.ndarray
    features_b: np.ndarray
    label: int
    record_id: str = ""
    text_a: str = ""
    text_b: str = ""

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "text_a": self.text_a,
            "text_b": self.text_b,
            "features_a": self.features_a.tolist(),
            "features_b": self.features_b.tolist(),
            "label": self.label,
        }


def _check_labelled(record: ClickbaitRecord) -> None:
    if not record.has_gold:
        raise DataError(f"record {record.id!r} has no gold spoiler")
    if not record.question:
        raise DataError(f"record {record.id!r} has no converted question")


def _scored_candidates(record: ClickbaitRecord, candidates: Iterable[Candidate]) -> list[tuple[str, float]]:
    gold = tokenize(record.spoiler)
    return [(c.text, sentence_bleu(tokenize(c.text), gold)) for c in candidates if c.text.strip()]


def build_pointwise_data(pools: Iterable[Pool]) -> list[PointwiseExample]:
    examples = []
    for record, candidates in pools:
        _check_labelled(record)
        for text, bleu in _scored_candidates(record, candidates):
            examples.append(PointwiseExample(record_features(record, text), bleu, record.id, text))
    return examples


def zero_overlap(text: str, gold: str) -> bool:
    """True when ``text`` shares no unigram with ``gold``.

    Such a candidate's smoothed BLEU is nothing but the smoothing floor, so
    pair filtering treats it as BLEU 0.
    """
    return clipped_ngram_stats(tokenize(text), tokenize(gold), 1)[0] == 0


def build_pairwise_data(pools: Iterable[Pool]) -> list[PairwiseExample]:
    """Ordered pairs of same-record candidates labelled by which has higher BLEU.

    Dropped: pairs where either side has BLEU 0 (see :func:`zero_overlap`),
    identical texts, and exact BLEU ties. Every kept pair is emitted in both
    orders.
    """
    examples = []
    for record, candidates in pools:
        _check_labelled(record)
        scored = [
            (text, 0.0 if zero_overlap(text, record.spoiler) else bleu)
            for text, bleu in _scored_candidates(record, candidates)
        ]
        feats = [record_features(record, text) for text, _ in scored]
        for i, (text_a, bleu_a) in enumerate(scored):
            for j, (text_b, bleu_b) in enumerate(scored):
                if i == j or text_a == text_b:
                    continue
                if bleu_a == 0 or bleu_b == 0 or bleu_a == bleu_b:
                    continue
                examples.append(
                    PairwiseExample(feats[i], feats[j], int(bleu_a > bleu_b), record.id, text_a, text_b)
                )
    return examples


# --- losses -----------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mse_loss_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean squared error of ``X @ w + b``; ``theta`` is ``[w..., b]``."""
    w, b = theta[:-1], theta[-1]
    r = X @ w + b - y
    n = len(y)
    loss = float(r @ r / n + 0.5 * l2 * (w @ w))
    grad = np.empty_like(theta)
    grad[:-1] = 2.0 * (X.T @ r) / n + l2 * w
    grad[-1] = 2.0 * r.sum() / n
    return loss, grad


def bce_loss_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of ``sigmoid(X @ w + b)`` against 0/1 labels."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    n = len(y)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))
    d = _sigmoid(z) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ d / n + l2 * w
    grad[-1] = d.sum() / n
    return loss, grad


# --- scorer -----------------------------------------------------------------


@dataclass
class TrainerConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    seed: int = 42
    l2: float = 0.0
    holdout: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Scorer(Protocol):
    flavor: str

    # pointwise scorers implement score(), pairwise ones prefer()
    def score(self, record: ClickbaitRecord, text: str) -> float: ...

    def prefer(self, record: ClickbaitRecord, text_a: str, text_b: str) -> float: ...


@dataclass
class LinearScorer:
    """Feature-linear scorer. Weights live in raw feature space."""

    flavor: str
    weights: np.ndarray
    bias: float
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = {"pointwise": N_FEATURES, "pairwise": 3 * N_FEATURES}.get(self.flavor)
        if expected is None:
            raise ValueError(f"unknown scorer flavor {self.flavor!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (expected,):
            raise ValueError(f"{self.flavor} scorer needs {expected} weights, got {self.weights.shape}")
        self.bias = float(self.bias)

    def predict(self, X: np.ndarray) -> np.ndarray:
        z = np.asarray(X, dtype=np.float64) @ self.weights + self.bias
        return z if self.flavor == "pointwise" else _sigmoid(z)

    def score(self, record: ClickbaitRecord, text: str) -> float:
        self._need("pointwise")
        return float(self.predict(record_features(record, text)))

    def prefer(self, record: ClickbaitRecord, text_a: str, text_b: str) -> float:
        self._need("pairwise")
        return float(self.predict(pair_input(record_features(record, text_a), record_features(record, text_b))))

    def _need(self, flavor: str) -> None:
        if self.flavor != flavor:
            raise ValueError(f"this is a {self.flavor} scorer, {flavor} use requested")

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "flavor": self.flavor,
            "feature_schema": FEATURE_SCHEMA,
            "feature_names": list(FEATURE_NAMES),
            "weights": [float(w) for w in self.weights],
            "bias": self.bias,
            "info": self.info,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, raw: dict) -> "LinearScorer":
        if raw.get("format") != MODEL_FORMAT:
            raise DataError("not a scorer model file")
        if raw.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported scorer model version {raw.get('version')!r}")
        if raw.get("feature_schema") != FEATURE_SCHEMA:
            raise DataError("scorer was trained on a different feature schema")
        return cls(raw["flavor"], np.array(raw["weights"], dtype=np.float64), raw["bias"], raw.get("info", {}))

    @classmethod
    def load(cls, path: str | Path) -> "LinearScorer":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: malformed scorer file ({exc.msg})") from None
        return cls.from_json(raw)


class OracleScorer:
    """Scores with the true sentence BLEU against the record's gold spoiler.

    Only meaningful on labelled data; used for upper bounds and tests.
    """

    def __init__(self, flavor: str = "pointwise") -> None:
        if flavor not in ("pointwise", "pairwise"):
            raise ValueError(f"unknown scorer flavor {flavor!r}")
        self.flavor = flavor

    def score(self, record: ClickbaitRecord, text: str) -> float:
        if not record.has_gold:
            raise DataError(f"oracle scorer needs a gold spoiler for record {record.id!r}")
        cand = tokenize(text)
        return sentence_bleu(cand, tokenize(record.spoiler))

    def prefer(self, record: ClickbaitRecord, text_a: str, text_b: str) -> float:
        a, b = self.score(record, text_a), self.score(record, text_b)
        return 1.0 if a > b else 0.0 if a < b else 0.5


class RemoteScorer:
    """Adapter for a scoring service speaking ``POST /v1/score``."""

    def __init__(self, spec: BackendSpec, flavor: str, meta: RunMetadata | None = None) -> None:
        self.spec = spec
        self.flavor = flavor
        self.meta = meta

    def score(self, record: ClickbaitRecord, text: str) -> float:
        return remote_score(self.spec, record.question or record.clickbait, record.article, text, meta=self.meta)

    def prefer(self, record: ClickbaitRecord, text_a: str, text_b: str) -> float:
        return remote_score(
            self.spec, record.question or record.clickbait, record.article, text_a, text_b, meta=self.meta
        )


# --- training ---------------------------------------------------------------


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (X - mu) / sd, mu, sd


def _descend(loss_grad, X, y, theta, config: TrainerConfig) -> tuple[np.ndarray, list[float]]:
    history = []
    for _ in range(config.epochs):
        loss, grad = loss_grad(theta, X, y, config.l2)
        history.append(loss)
        theta = theta - config.learning_rate * grad
    history.append(loss_grad(theta, X, y, config.l2)[0])
    return theta, history


def _to_raw(theta: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> tuple[np.ndarray, float]:
    w_std, b_std = theta[:-1], theta[-1]
    w = w_std / sd
    return w, float(b_std - w @ mu)


def train_pointwise(examples: Sequence[PointwiseExample], config: TrainerConfig | None = None) -> LinearScorer:
    """Least-squares linear scorer fit by gradient descent on standardized features."""
    config = config or TrainerConfig()
    if len(examples) < 2:
        raise ValueError("train_pointwise needs at least 2 examples")
    X = np.stack([e.features for e in examples]).astype(np.float64)
    y = np.array([e.target for e in examples], dtype=np.float64)
    if np.all(y == y[0]):
        log.warning("all %d pointwise targets equal %.6g; returning a constant scorer", len(y), y[0])
        info = {"warning": "constant_targets", "train_mse": 0.0, "n_examples": len(y), "seed": config.seed}
        return LinearScorer("pointwise", np.zeros(X.shape[1]), float(y[0]), info)

    Xs, mu, sd = _standardize(X)
    rng = np.random.default_rng(config.seed)
    theta = np.append(rng.normal(0.0, 0.01, X.shape[1]), 0.0)
    theta, history = _descend(mse_loss_grad, Xs, y, theta, config)
    w, b = _to_raw(theta, mu, sd)
    scorer = LinearScorer("pointwise", w, b)
    train_mse = float(np.mean((scorer.predict(X) - y) ** 2))
    scorer.info = {
        "train_mse": train_mse,
        "loss_history": history,
        "n_examples": len(y),
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "epochs": config.epochs,
    }
    return scorer


def balanced_accuracy(labels: np.ndarray, predicted: np.ndarray) -> float:
    labels = np.asarray(labels).astype(int)
    predicted = np.asarray(predicted).astype(int)
    recalls = [float(np.mean(predicted[labels == c] == c)) for c in (0, 1) if np.any(labels == c)]
    if not recalls:
        raise ValueError("no labels")
    return sum(recalls) / len(recalls)


def _holdout_split(examples: Sequence[PairwiseExample], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    # split by record so both orders of a pair land in the same fold
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(examples):
        groups.setdefault(e.record_id or f"#{i}", []).append(i)
    keys = sorted(groups)
    if len(keys) < 2 or fraction <= 0:
        return list(range(len(examples))), []
    order = np.random.default_rng(seed).permutation(len(keys))
    n_hold = min(max(1, math.ceil(fraction * len(keys))), len(keys) - 1)
    hold_keys = {keys[k] for k in order[:n_hold]}
    train = [i for k in keys if k not in hold_keys for i in groups[k]]
    hold = [i for k in keys if k in hold_keys for i in groups[k]]
    return sorted(train), sorted(hold)


def train_pairwise(examples: Sequence[PairwiseExample], config: TrainerConfig | None = None) -> LinearScorer:
    """Logistic pairwise preference model; reports held-out balanced accuracy.

    Starts from zero weights, so with both orders of every pair present the
    learned model satisfies ``p(b, a) == 1 - p(a, b)`` up to rounding.
    """
    config = config or TrainerConfig()
    if len(examples) < 2:
        raise ValueError("train_pairwise needs at least 2 examples")
    X = np.stack([pair_input(e.features_a, e.features_b) for e in examples]).astype(np.float64)
    y = np.array([e.label for e in examples], dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise DataError("pairwise training data contains a single class")

    train_idx, hold_idx = _holdout_split(examples, config.holdout, config.seed)
    if len(set(y[train_idx].tolist())) < 2:
        log.warning("training fold is single-class; fitting on all data")
        train_idx, hold_idx = list(range(len(y))), []

    Xs, mu, sd = _standardize(X[train_idx])
    theta = np.zeros(X.shape[1] + 1)
    theta, history = _descend(bce_loss_grad, Xs, y[train_idx], theta, config)
    w, b = _to_raw(theta, mu, sd)
    scorer = LinearScorer("pairwise", w, b)

    train_pred = scorer.predict(X[train_idx]) > 0.5
    info = {
        "train_balanced_accuracy": balanced_accuracy(y[train_idx], train_pred),
        "loss_history": history,
        "n_examples": len(y),
        "n_train": len(train_idx),
        "n_holdout": len(hold_idx),
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "epochs": config.epochs,
    }
    if hold_idx:
        info["holdout_balanced_accuracy"] = balanced_accuracy(y[hold_idx], scorer.predict(X[hold_idx]) > 0.5)
    scorer.info = info
    return scorer


# --- selection --------------------------------------------------------------


def _priority_key(pool: Sequence[Candidate], priority: Sequence[str]):
    rank = {name: i for i, name in enumerate(priority)}
    return lambda i: (rank.get(pool[i].backend_name, len(rank)), i)


def choose_by_scores(pool: Sequence[Candidate], scores: Sequence[float], priority: Sequence[str] = ()) -> int:
    """Index of the top score; ties go to backend priority, then pool order."""
    if not pool:
        raise ValueError("empty candidate pool")
    best = max(scores)
    tied = [i for i, s in enumerate(scores) if s == best]
    return min(tied, key=_priority_key(pool, priority))


def pointwise_scores(scorer: Scorer, pool: Sequence[Candidate], record: ClickbaitRecord) -> list[float]:
    return [scorer.score(record, c.text) for c in pool]


def select_pointwise(
    scorer: Scorer, pool: Sequence[Candidate], record: ClickbaitRecord, priority: Sequence[str] = ()
) -> Candidate:
    if not pool:
        raise ValueError("empty candidate pool")
    if scorer.flavor != "pointwise":
        raise ValueError("select_pointwise needs a pointwise scorer")
    return pool[choose_by_scores(pool, pointwise_scores(scorer, pool, record), priority)]


def pairwise_tournament(
    scorer: Scorer, pool: Sequence[Candidate], record: ClickbaitRecord
) -> tuple[list[float], list[float]]:
    """Round robin: returns (wins, summed preference) per candidate.

    Each unordered pair is asked in both orders and the two answers are
    averaged into ``P(i beats j) = (p(i, j) + 1 - p(j, i)) / 2``. The pair's
    single win goes to the side above 0.5; an exact 0.5 gives half a win each.
    """
    k = len(pool)
    wins = [0.0] * k
    pref = [0.0] * k
    for i in range(k):
        for j in range(i + 1, k):
            p_ij = scorer.prefer(record, pool[i].text, pool[j].text)
            p_ji = scorer.prefer(record, pool[j].text, pool[i].text)
            p = 0.5 * (p_ij + 1.0 - p_ji)
            pref[i] += p
            pref[j] += 1.0 - p
            if p > 0.5:
                wins[i] += 1
            elif p < 0.5:
                wins[j] += 1
            else:
                wins[i] += 0.5
                wins[j] += 0.5
    return wins, pref


def choose_by_tournament(
    pool: Sequence[Candidate], wins: Sequence[float], pref: Sequence[float], priority: Sequence[str] = ()
) -> int:
    best_wins = max(wins)
    tied = [i for i in range(len(pool)) if wins[i] == best_wins]
    best_pref = max(pref[i] for i in tied)
    tied = [i for i in tied if pref[i] == best_pref]
    return min(tied, key=_priority_key(pool, priority))


def select_pairwise(
    scorer: Scorer, pool: Sequence[Candidate], record: ClickbaitRecord, priority: Sequence[str] = ()
) -> Candidate:
    """Copeland winner of the pairwise tournament (see :func:`pairwise_tournament`)."""
    if not pool:
        raise ValueError("empty candidate pool")
    if scorer.flavor != "pairwise":
        raise ValueError("select_pairwise needs a pairwise scorer")
    wins, pref = pairwise_tournament(scorer, pool, record)
    return pool[choose_by_tournament(pool, wins, pref, priority)]


def write_examples(examples: Iterable[PointwiseExample | PairwiseExample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n
