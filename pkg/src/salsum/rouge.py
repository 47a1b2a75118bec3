"""ROUGE-1/2/L scoring and top-k salient-word extraction.

ROUGE-N counts clipped n-gram overlap (multiset intersection); ROUGE-L uses
the longest common subsequence.  F-measure is the plain harmonic mean.
Multiple references are aggregated by taking the best-f1 reference.  The
top-k protocol treats the k highest-attention source words as a bag-of-words
summary and scores it with ROUGE-1 f1.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import TrainingPair
from .model import ModelConfig, source_representations


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _score(overlap: int, n_cand: int, n_ref: int) -> RougeScore:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    return RougeScore(precision=p, recall=r, f1=_f_measure(p, r))


def _best(scores: list[RougeScore]) -> RougeScore:
    best = scores[0]
    for s in scores[1:]:
        if s.f1 > best.f1:
            best = s
    return best


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int) -> RougeScore:
    """Clipped n-gram overlap; best-f1 reference wins for multi-reference."""
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    if not references:
        raise ValueError("at least one reference is required")
    cand = _ngrams(candidate, n)
    n_cand = max(len(candidate) - n + 1, 0)
    scores = []
    for ref in references:
        ref_counts = _ngrams(ref, n)
        overlap = sum(min(count, ref_counts[gram]) for gram, count in cand.items())
        scores.append(_score(overlap, n_cand, max(len(ref) - n + 1, 0)))
    return _best(scores)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> RougeScore:
    """Longest-common-subsequence score; best-f1 reference wins."""
    if not references:
        raise ValueError("at least one reference is required")
    scores = []
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        scores.append(_score(lcs, len(candidate), len(ref)))
    return _best(scores)


def top_k_salient(attention, tokens: Sequence[str], k: int) -> list[str]:
    """Tokens of the k largest attention weights, descending.

    Ties go to the earlier position; duplicate surface forms are removed
    after ranking (first occurrence kept), so fewer than k words can come
    back when the source repeats itself.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    weights = np.asarray(attention, dtype=np.float64)
    if weights.shape != (len(tokens),):
        raise ValueError(f"{weights.shape[0]} weights vs {len(tokens)} tokens")
    order = np.argsort(-weights, kind="stable")
    seen = set()
    out: list[str] = []
    for idx in order:
        tok = tokens[int(idx)]
        if tok in seen:
            continue
        seen.add(tok)
        out.append(tok)
        if len(out) == k:
            break
    return out


def evaluate_topk(
    pairs: Sequence[TrainingPair],
    params,
    cfg: ModelConfig,
    k: int,
    which: str,
) -> float:
    """Mean ROUGE-1 f1 of top-k extracted words against the gold summaries.

    which selects the attention head: "suatt" reads the supervised vector,
    "unatt" the word-graph vector.  Both branches are forced on regardless
    of the decoder wiring, so any trained checkpoint can be inspected.
    """
    if which not in ("suatt", "unatt"):
        raise ValueError(f"unknown attention head: {which!r}")
    total = 0.0
    count = 0
    with ad.no_grad():
        for pair in pairs:
            ctx = source_representations(pair, params, cfg, force_all=True)
            if which == "suatt":
                weights = ctx.salience.a_s.data
            else:
                if ctx.graph is None:
                    continue
                weights = ctx.graph.a_u.data
            words = top_k_salient(weights, pair.source_tokens, k)
            total += rouge_n(words, [pair.summary_tokens], 1).f1
            count += 1
    return total / count if count else 0.0
