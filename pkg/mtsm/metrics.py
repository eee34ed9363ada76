# mtsm/metrics.py
"""
Corpus-level BLEU-1..4.

Modified n-gram precision: each candidate n-gram count is clipped by its
largest count in any one reference of that candidate; matches and totals
are summed over the corpus before the ratio is taken. The brevity penalty
compares total candidate length c with r, the sum of each candidate's
closest reference length (shorter wins ties).
"""
from __future__ import annotations

import math
from collections import Counter
from typing import List, Optional, Sequence, Tuple

from mtsm.errors import ConfigError, ContractError
from mtsm.models import BleuReport

Tokens = Sequence[str]

MAX_ORDER = 4


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                             n: int) -> Tuple[int, int]:
    """(clipped matches, candidate n-grams) summed over the corpus."""
    if n < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {n}")
    _check_aligned(candidates, references)
    matches = total = 0
    for cand, refs in zip(candidates, references):
        counts = ngram_counts(cand, n)
        if not counts:
            continue
        max_ref: Counter = Counter()
        for ref in refs:
            max_ref |= ngram_counts(ref, n)
        matches += sum(min(c, max_ref[g]) for g, c in counts.items())
        total += sum(counts.values())
    return matches, total


def closest_ref_length(candidate: Tokens, refs: Sequence[Tokens]) -> int:
    c = len(candidate)
    return min((len(r) for r in refs), key=lambda rl: (abs(rl - c), rl))


def brevity_penalty(c: int, r: int) -> float:
    if c > r:
        return 1.0
    if c == 0:
        return 0.0
    return math.exp(1.0 - r / c)


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                max_order: int = MAX_ORDER, smooth_floor: Optional[float] = None) -> BleuReport:
    """
    BLEU-n = BP * exp(mean_k<=n log p_k) * 100. Any p_k = 0 gives BLEU-n = 0
    unless `smooth_floor` replaces zero match counts by that value.
    """
    if max_order != MAX_ORDER:
        raise ConfigError(f"reports carry BLEU-1..{MAX_ORDER}; max_order must be {MAX_ORDER}")
    _check_aligned(candidates, references)
    if not candidates:
        raise ContractError("cannot score an empty corpus")

    stats = [modified_ngram_precision(candidates, references, n) for n in range(1, MAX_ORDER + 1)]
    c = sum(len(cand) for cand in candidates)
    r = sum(closest_ref_length(cand, refs) for cand, refs in zip(candidates, references))
    bp = brevity_penalty(c, r)

    log_p: List[Optional[float]] = []
    for matches, total in stats:
        if total == 0:
            log_p.append(None)
        elif matches == 0:
            log_p.append(math.log(smooth_floor / total) if smooth_floor else None)
        else:
            log_p.append(math.log(matches / total))

    scores = []
    for n in range(1, MAX_ORDER + 1):
        head = log_p[:n]
        if bp == 0.0 or any(lp is None for lp in head):
            scores.append(0.0)
        else:
            scores.append(min(100.0, 100.0 * bp * math.exp(sum(head) / n)))

    return BleuReport(
        bleu_1=scores[0], bleu_2=scores[1], bleu_3=scores[2], bleu_4=scores[3],
        brevity_penalty=bp, candidate_length=c, reference_length=r,
        matches=[m for m, _ in stats], totals=[t for _, t in stats],
        smooth_floor=smooth_floor,
    )


def _check_aligned(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise ContractError(f"candidate {i} has no reference")
