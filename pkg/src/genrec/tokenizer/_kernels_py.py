"""Pure-Python BPE kernels.  Reference behaviour for the compiled ``_kernels`` module."""

from __future__ import annotations

import heapq
from collections import defaultdict

BACKEND = "python"


def _merge(word: list[int], a: int, b: int, new: int) -> list[int]:
    out = []
    i, n = 0, len(word)
    while i < n:
        if i + 1 < n and word[i] == a and word[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return out


def learn_merges(
    words: list[list[int]],
    freqs: list[int],
    token_bytes: list[bytes],
    max_tokens: int,
    min_count: int = 2,
) -> list[tuple[int, int, int]]:
    """Greedy BPE merge learning over pre-split words.

    The most frequent adjacent pair is merged first; ties go to the pair whose
    (left bytes, right bytes) is lexicographically smallest.  A merge whose
    bytes already name a token reuses that id, otherwise the next free id is
    taken.  Stops at ``max_tokens`` tokens or when no pair reaches ``min_count``.
    Returns ``(left, right, result)`` id triples in learned order.
    """
    words = [list(w) for w in words]
    tb = list(token_bytes)
    ids_by_bytes = {}
    for i, t in enumerate(tb):
        ids_by_bytes.setdefault(t, i)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for p in zip(w, w[1:]):
            counts[p] += f
            where[p].add(wi)

    heap = [(-c, tb[a], tb[b], a, b) for (a, b), c in counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int, int]] = []
    while len(tb) < max_tokens and heap:
        neg, _, _, a, b = heapq.heappop(heap)
        if counts.get((a, b), 0) != -neg:
            continue
        if -neg < min_count:
            break
        joined = tb[a] + tb[b]
        new = ids_by_bytes.get(joined, -1)
        if new < 0:
            new = ids_by_bytes[joined] = len(tb)
            tb.append(joined)
        merges.append((a, b, new))
        touched: set[tuple[int, int]] = set()
        for wi in sorted(where.pop((a, b), ())):
            w = words[wi]
            f = freqs[wi]
            nw = _merge(w, a, b, new)
            if len(nw) == len(w):
                continue
            for p in zip(w, w[1:]):
                counts[p] -= f
                touched.add(p)
            for p in zip(nw, nw[1:]):
                counts[p] += f
                where[p].add(wi)
                touched.add(p)
            words[wi] = nw
        counts.pop((a, b), None)
        for p in touched:
            c = counts.get(p, 0)
            if c <= 0:
                counts.pop(p, None)
            elif p != (a, b):
                heapq.heappush(heap, (-c, tb[p[0]], tb[p[1]], p[0], p[1]))
    return merges


class MergeTable:
    """Applies learned merges to one pre-split chunk, lowest rank first."""

    def __init__(self, merges: list[tuple[int, int, int]]):
        self.merges = [tuple(m) for m in merges]
        self.ranks = {(a, b): r for r, (a, b, _) in enumerate(self.merges)}

    def encode(self, ids: list[int]) -> list[int]:
        ranks = self.ranks
        word = list(ids)
        while len(word) > 1:
            best = -1
            for p in zip(word, word[1:]):
                r = ranks.get(p, -1)
                if r >= 0 and (best < 0 or r < best):
                    best = r
            if best < 0:
                break
            word = _merge(word, *self.merges[best])
        return word
