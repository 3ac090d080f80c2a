"""Gestalt (Ratcliff/Obershelp) similarity over byte strings.

The score is ``2 * K / (len(a) + len(b))`` where K counts the bytes matched by
repeatedly taking the longest common substring and recursing on the pieces to
its left and right. Ties between equally long substrings go to the earliest
start in ``a``, then the earliest start in ``b`` (the same rule difflib uses).

That tie-break makes the raw decomposition order-dependent, so ``similarity``
always puts the shorter sequence (then the lexicographically smaller one)
first. The score is therefore symmetric.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence


def longest_match(a: Sequence, b: Sequence, alo: int, ahi: int, blo: int, bhi: int) -> tuple[int, int, int]:
    """Longest common substring of a[alo:ahi] and b[blo:bhi] as (i, j, size)."""
    best_i, best_j, best = alo, blo, 0
    prev = [0] * (bhi - blo + 1)
    for i in range(alo, ahi):
        cur = [0] * (bhi - blo + 1)
        ai = a[i]
        for j in range(blo, bhi):
            if ai == b[j]:
                k = prev[j - blo] + 1
                cur[j - blo + 1] = k
                if k > best:
                    best_i, best_j, best = i - k + 1, j - k + 1, k
        prev = cur
    return best_i, best_j, best


def matching_blocks(a: Sequence, b: Sequence) -> list[tuple[int, int, int]]:
    """All (i, j, size) blocks of the recursive decomposition, sorted by position."""
    blocks = []
    stack = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        if alo >= ahi or blo >= bhi:
            continue
        i, j, k = longest_match(a, b, alo, ahi, blo, bhi)
        if k == 0:
            continue
        blocks.append((i, j, k))
        stack.append((alo, i, blo, j))
        stack.append((i + k, ahi, j + k, bhi))
    blocks.sort()
    return blocks


def matched_count(a: Sequence, b: Sequence) -> int:
    return sum(k for _, _, k in matching_blocks(a, b))


def canonical_pair(a: Sequence, b: Sequence) -> tuple[Sequence, Sequence]:
    return (a, b) if (len(a), tuple(a)) <= (len(b), tuple(b)) else (b, a)


def similarity(a: Sequence, b: Sequence) -> Fraction:
    total = len(a) + len(b)
    if total == 0:
        return Fraction(1)
    a, b = canonical_pair(a, b)
    return Fraction(2 * matched_count(a, b), total)
