"""Sentence-level text generation metrics: BLEU-4, METEOR, BERTScore.

All three work on token lists produced by :func:`tokenize`. Scores are on
the [0, 1] scale; presentation scaling (BLEU x100) happens in the report.

BLEU here is mean-of-sentence BLEU-4 with a "half count" smoothing of zero
precisions, so numbers are not bit-comparable with sacrebleu or NLTK.
METEOR has no synonym stage (exact and stem matching only).
"""

from __future__ import annotations

import math
import string
import unicodedata
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .backend import BackendSpec

TokenSeq = Sequence[str]

BLEU_MAX_ORDER = 4
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
ALIGN_BEAM_WIDTH = 256


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel punctuation off both word ends.

    Every peeled punctuation character becomes its own token, so
    ``"Promotional code."`` gives ``["promotional", "code", "."]``.
    Internal punctuation (``don't``, ``3.5``) is kept.
    """
    tokens: list[str] = []
    for word in text.lower().split():
        start, end = 0, len(word)
        while start < end and _is_punct(word[start]):
            start += 1
        while end > start and _is_punct(word[end - 1]):
            end -= 1
        tokens.extend(word[:start])
        if start < end:
            tokens.append(word[start:end])
        tokens.extend(word[end:])
    return tokens


# --- BLEU -------------------------------------------------------------------


def ngram_counts(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def clipped_ngram_stats(candidate: TokenSeq, reference: TokenSeq, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for order ``n``."""
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    matches = sum(min(c, ref[g]) for g, c in cand.items())
    return matches, max(len(candidate) - n + 1, 0)


def sentence_bleu(candidate: TokenSeq, reference: TokenSeq, max_order: int = BLEU_MAX_ORDER) -> float:
    """BLEU-4 of one candidate against one reference.

    A zero-match order with at least one candidate n-gram contributes
    ``1 / (2 * ngram_count)``; orders longer than the candidate are left out
    of the geometric mean.
    """
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    log_p = []
    for n in range(1, max_order + 1):
        matches, total = clipped_ngram_stats(candidate, reference, n)
        if total == 0:
            continue
        p = matches / total if matches else 1.0 / (2 * total)
        log_p.append(math.log(p))
    c, r = len(candidate), len(reference)
    log_bp = 1.0 - r / c if c < r else 0.0
    return math.exp(log_bp + sum(log_p) / len(log_p))


def corpus_bleu(pairs: Sequence[tuple[TokenSeq, TokenSeq]]) -> float:
    """Arithmetic mean of sentence BLEU over (candidate, reference) pairs."""
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    return sum(sentence_bleu(c, r) for c, r in pairs) / len(pairs)


# --- METEOR -----------------------------------------------------------------

_SUFFIXES = (
    "ational", "ization", "fulness", "ousness", "iveness", "ingly", "ments",
    "ness", "ment", "ings", "edly", "ies", "ied", "ing", "ly", "ed", "es", "s",
)  # fmt: skip


def stem(token: str) -> str:
    """Tiny deterministic suffix stripper used by METEOR's second stage.

    Strips the longest listed suffix that leaves at least three characters,
    then a doubled final consonant or a silent trailing ``e``.
    """
    base = token
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            base = token[: -len(suffix)]
            if suffix in ("ies", "ied"):
                base += "y"
            break
    if len(base) > 3 and base[-1] == base[-2] and base[-1] not in "aeiouls":
        base = base[:-1]
    elif len(base) > 3 and base.endswith("e"):
        base = base[:-1]
    return base


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    """Number of maximal runs contiguous in both candidate and reference."""
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _align_stage(
    cand_keys: Sequence[str | None],
    ref_keys: Sequence[str | None],
    fixed: dict[int, int],
    beam_width: int = ALIGN_BEAM_WIDTH,
) -> list[tuple[int, int]]:
    """Extend ``fixed`` with key-equal pairs: most matches, then fewest chunks.

    Left-to-right beam search over candidate positions. Partial states are
    merged when they have used the same reference positions and end the same
    way, which makes the search exact for the short sequences spoilers have.
    """
    blocked = set(fixed.values())
    by_key: dict[str, list[int]] = defaultdict(list)
    for j, key in enumerate(ref_keys):
        if key is not None and j not in blocked:
            by_key[key].append(j)

    # state: (matches, chunks, pairs, used, last_pair)
    beam = [(0, 0, (), frozenset(), None)]
    for i, key in enumerate(cand_keys):
        if i in fixed:
            options = [fixed[i]]
            can_skip = False
        else:
            options = by_key.get(key, []) if key is not None else []
            can_skip = True
        merged: dict = {}
        for matches, chunks, pairs, used, last in beam:
            successors = []
            if can_skip:
                successors.append((matches, chunks, pairs, used, last))
            for j in options:
                if j in used:
                    continue
                extends = last is not None and last == (i - 1, j - 1)
                successors.append(
                    (matches + 1, chunks + (0 if extends else 1), pairs + ((i, j),), used | {j}, (i, j))
                )
            for state in successors:
                tail = state[4] if state[4] is not None and state[4][0] == i else None
                mkey = (state[3], tail)
                best = merged.get(mkey)
                if best is None or _rank(state) < _rank(best):
                    merged[mkey] = state
        beam = sorted(merged.values(), key=_rank)[:beam_width]
    return list(min(beam, key=_rank)[2])


def _rank(state) -> tuple:
    matches, chunks, pairs, _, _ = state
    return (-matches, chunks, pairs)


def meteor_alignment(candidate: TokenSeq, reference: TokenSeq) -> list[tuple[int, int]]:
    """Exact-match stage, then stem-match stage over still-unaligned tokens."""
    exact = _align_stage(list(candidate), list(reference), {})
    fixed = dict(exact)
    aligned_ref = set(fixed.values())
    cand_stems = [None if i in fixed else stem(t) for i, t in enumerate(candidate)]
    ref_stems = [None if j in aligned_ref else stem(t) for j, t in enumerate(reference)]
    return _align_stage(cand_stems, ref_stems, fixed)


def meteor(
    candidate: TokenSeq,
    reference: TokenSeq,
    alpha: float = METEOR_ALPHA,
    beta: float = METEOR_BETA,
    gamma: float = METEOR_GAMMA,
) -> float:
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    alignment = meteor_alignment(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = gamma * (count_chunks(alignment) / m) ** beta
    return f_mean * (1 - penalty)


# --- BERTScore --------------------------------------------------------------


def greedy_match_scores(cand_vecs: np.ndarray, ref_vecs: np.ndarray) -> tuple[float, float, float]:
    """Greedy cosine matching; returns (precision, recall, f1).

    F1 is the harmonic mean when both precision and recall are positive and
    0 otherwise (keeps it inside [-1, 1]).
    """
    cand = np.asarray(cand_vecs, dtype=np.float64)
    ref = np.asarray(ref_vecs, dtype=np.float64)
    if cand.ndim != 2 or ref.ndim != 2 or not len(cand) or not len(ref):
        raise ValueError("need two non-empty 2-d arrays of token vectors")
    if cand.shape[1] != ref.shape[1]:
        raise ValueError(f"embedding dimensions differ: {cand.shape[1]} vs {ref.shape[1]}")
    cand = _unit_rows(cand)
    ref = _unit_rows(ref)
    sim = cand @ ref.T
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    if precision > 0 and recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return precision, recall, f1


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    # zero vectors stay zero and match nothing
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


EmbedFn = Callable[[Sequence[str]], np.ndarray]


def bertscore(
    candidate: TokenSeq,
    reference: TokenSeq,
    embedder: "BackendSpec | EmbedFn",
) -> tuple[float, float, float]:
    """BERTScore without idf weighting or baseline rescaling.

    ``embedder`` is either an embedding :class:`~spoilergen.backend.BackendSpec`
    or any callable mapping a token list to an ``(n_tokens, dim)`` array.
    """
    if not candidate or not reference:
        raise ValueError("bertscore needs non-empty candidate and reference")
    embed = embedder if callable(embedder) else _backend_embedder(embedder)
    return greedy_match_scores(embed(candidate), embed(reference))


def _backend_embedder(spec: "BackendSpec") -> EmbedFn:
    from .backend import embed_token_list

    return lambda tokens: embed_token_list(spec, tokens)


@dataclass(frozen=True)
class MetricReport:
    bleu: float
    meteor: float
    bert_precision: float | None = None
    bert_recall: float | None = None
    bert_f1: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def score_pair(
    candidate_text: str,
    reference_text: str,
    embedder: "BackendSpec | EmbedFn | None" = None,
) -> MetricReport:
    """All metrics for one candidate string against one reference string.

    An empty candidate scores 0 everywhere (including BERTScore).
    """
    cand = tokenize(candidate_text)
    ref = tokenize(reference_text)
    if not ref:
        raise ValueError("reference has no tokens")
    bleu = sentence_bleu(cand, ref)
    met = meteor(cand, ref)
    if embedder is None:
        return MetricReport(bleu, met)
    if not cand:
        return MetricReport(bleu, met, 0.0, 0.0, 0.0)
    p, r, f = bertscore(cand, ref, embedder)
    return MetricReport(bleu, met, p, r, f)
