# distutils: language = c++
# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled BPE kernels.  Must stay output-identical to ``_kernels_py``."""

import heapq

from libc.stdint cimport int64_t
from libcpp.unordered_map cimport unordered_map
from libcpp.unordered_set cimport unordered_set
from libcpp.vector cimport vector
from cython.operator cimport dereference as deref, preincrement as inc

BACKEND = "cython"


cdef inline int64_t _key(int a, int b) nogil:
    return (<int64_t>a << 32) | <int64_t>(<unsigned int>b)


cdef void _merge(const vector[int]& word, int a, int b, int new, vector[int]& out) nogil:
    cdef size_t i = 0, n = word.size()
    out.clear()
    while i < n:
        if i + 1 < n and word[i] == a and word[i + 1] == b:
            out.push_back(new)
            i += 2
        else:
            out.push_back(word[i])
            i += 1


def learn_merges(list words, list freqs, list token_bytes, int max_tokens, int64_t min_count=2):
    cdef vector[vector[int]] w
    cdef vector[int64_t] f
    cdef unordered_map[int64_t, int64_t] counts
    cdef unordered_map[int64_t, unordered_set[int]] where
    cdef unordered_set[int64_t] touched
    cdef vector[int] nw
    cdef vector[int] idx
    cdef size_t j
    cdef int wi, a, b, new, pa, pb
    cdef int64_t fr, c, k

    for py_w in words:
        w.push_back(py_w)
    for py_f in freqs:
        f.push_back(py_f)
    for wi in range(<int>w.size()):
        fr = f[wi]
        for j in range(1, w[wi].size()):
            k = _key(w[wi][j - 1], w[wi][j])
            counts[k] += fr
            where[k].insert(wi)

    tb = list(token_bytes)
    ids_by_bytes = {}
    for i, t in enumerate(tb):
        ids_by_bytes.setdefault(t, i)
    heap = []
    cdef unordered_map[int64_t, int64_t].iterator it = counts.begin()
    while it != counts.end():
        k = deref(it).first
        pa = <int>(k >> 32)
        pb = <int>(k & 0xFFFFFFFF)
        heap.append((-deref(it).second, tb[pa], tb[pb], pa, pb))
        inc(it)
    heapq.heapify(heap)

    merges = []
    while len(tb) < max_tokens and heap:
        neg, _, _, a, b = heapq.heappop(heap)
        k = _key(a, b)
        c = counts[k] if counts.count(k) else 0
        if c != -neg:
            continue
        if c < min_count:
            break
        joined = tb[a] + tb[b]
        new = ids_by_bytes.get(joined, -1)
        if new < 0:
            new = len(tb)
            ids_by_bytes[joined] = new
            tb.append(joined)
        merges.append((a, b, new))
        touched.clear()

        idx.clear()
        if where.count(k):
            for wi in where[k]:
                idx.push_back(wi)
            where.erase(k)
        idx_sorted = sorted([idx[j] for j in range(idx.size())])
        for wi in idx_sorted:
            _merge(w[wi], a, b, new, nw)
            if nw.size() == w[wi].size():
                continue
            fr = f[wi]
            for j in range(1, w[wi].size()):
                k = _key(w[wi][j - 1], w[wi][j])
                counts[k] -= fr
                touched.insert(k)
            for j in range(1, nw.size()):
                k = _key(nw[j - 1], nw[j])
                counts[k] += fr
                where[k].insert(wi)
                touched.insert(k)
            w[wi] = nw
        counts.erase(_key(a, b))

        pending = []
        for k in touched:
            c = counts[k] if counts.count(k) else 0
            if c <= 0:
                counts.erase(k)
            elif k != _key(a, b):
                pending.append((k, c))
        for k, c in pending:
            pa = <int>(k >> 32)
            pb = <int>(k & 0xFFFFFFFF)
            heapq.heappush(heap, (-c, tb[pa], tb[pb], pa, pb))
    return merges


cdef class MergeTable:
    cdef unordered_map[int64_t, int] ranks
    cdef vector[int] left
    cdef vector[int] right
    cdef vector[int] result

    def __init__(self, list merges):
        cdef int r = 0
        for a, b, c in merges:
            self.ranks[_key(a, b)] = r
            self.left.push_back(a)
            self.right.push_back(b)
            self.result.push_back(c)
            r += 1

    @property
    def merges(self):
        return [(self.left[i], self.right[i], self.result[i]) for i in range(self.left.size())]

    def encode(self, ids):
        cdef vector[int] word = ids
        cdef vector[int] tmp
        cdef int best, r
        cdef size_t j
        cdef unordered_map[int64_t, int].iterator hit
        while word.size() > 1:
            best = -1
            for j in range(1, word.size()):
                hit = self.ranks.find(_key(word[j - 1], word[j]))
                if hit != self.ranks.end():
                    r = deref(hit).second
                    if best < 0 or r < best:
                        best = r
            if best < 0:
                break
            _merge(word, self.left[best], self.right[best], self.result[best], tmp)
            word.swap(tmp)
        return word
