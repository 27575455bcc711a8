from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIALS = {"PAD": PAD_ID, "BOS": BOS_ID, "EOS": EOS_ID}
BYTE_OFFSET = len(SPECIALS)
MIN_VOCAB_SIZE = 256 + BYTE_OFFSET
DEFAULT_VOCAB_SIZE = 8192
FORMAT_VERSION = 1

# Newline is always a chunk of its own, so no merge ever crosses it.  A space is
# glued to the front of the word that follows it.
_SPLIT = re.compile(r"\n| ?[^\W\d_]+| ?\d+| ?_+| ?[^\s\w]+|[^\S\n]+(?!\S)|[^\S\n]+")

_CACHE_LIMIT = 1 << 16


class TokenizerError(ValueError):
    pass


def pre_split(text: str) -> list[str]:
    """Chunks that BPE merges stay within.  ``"".join(pre_split(s)) == s``."""
    return _SPLIT.findall(text)


def _byte_ids(chunk: str) -> list[int]:
    return [b + BYTE_OFFSET for b in chunk.encode("utf-8")]


def _kernels():
    from . import kernels

    return kernels


class BPETokenizer:
    """Immutable byte-level BPE model.

    Ids 0-2 are PAD/BOS/EOS, 3-258 the raw bytes, and merged tokens follow in
    the order they were learned.
    """

    def __init__(self, merges: Sequence[tuple[int, int, int]] = (), kernels=None):
        self._kernels = kernels or _kernels()
        token_bytes = [b""] * BYTE_OFFSET + [bytes([i]) for i in range(256)]
        for n, (a, b, c) in enumerate(merges):
            if not (BYTE_OFFSET <= a < len(token_bytes) and BYTE_OFFSET <= b < len(token_bytes)):
                raise TokenizerError(f"merge {n} references unknown token ({a}, {b})")
            joined = token_bytes[a] + token_bytes[b]
            if c == len(token_bytes):
                token_bytes.append(joined)
            elif not (BYTE_OFFSET <= c < len(token_bytes) and token_bytes[c] == joined):
                raise TokenizerError(f"merge {n} has inconsistent result id {c}")
        self.merges: tuple[tuple[int, int, int], ...] = tuple((int(a), int(b), int(c)) for a, b, c in merges)
        self.token_bytes: tuple[bytes, ...] = tuple(token_bytes)
        self._table = self._kernels.MergeTable(list(self.merges))
        self._cache: dict[str, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    @property
    def backend(self) -> str:
        return self._kernels.BACKEND

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BPETokenizer) and self.merges == other.merges

    def __hash__(self) -> int:
        return hash(self.merges)

    def __repr__(self) -> str:
        return f"BPETokenizer(vocab_size={self.vocab_size}, backend={self.backend!r})"

    # -- training -----------------------------------------------------------

    @classmethod
    def train(cls, corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE, kernels=None) -> "BPETokenizer":
        if vocab_size < MIN_VOCAB_SIZE:
            raise TokenizerError(f"vocab_size must be >= {MIN_VOCAB_SIZE}, got {vocab_size}")
        kernels = kernels or _kernels()
        chunk_counts: Counter[str] = Counter()
        for text in corpus:
            chunk_counts.update(pre_split(text))
        chunks = sorted(c for c in chunk_counts if c != "\n")
        words = [_byte_ids(c) for c in chunks]
        freqs = [chunk_counts[c] for c in chunks]
        base = [b""] * BYTE_OFFSET + [bytes([i]) for i in range(256)]
        merges = kernels.learn_merges(words, freqs, base, vocab_size)
        return cls(merges, kernels=kernels)

    # -- encoding -----------------------------------------------------------

    def _encode_chunk(self, chunk: str) -> list[int]:
        ids = self._cache.get(chunk)
        if ids is None:
            ids = self._table.encode(_byte_ids(chunk))
            if len(self._cache) < _CACHE_LIMIT:
                self._cache[chunk] = ids
        return ids

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        out = [BOS_ID] if add_bos else []
        for chunk in pre_split(text):
            out.extend(self._encode_chunk(chunk))
        if add_eos:
            out.append(EOS_ID)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        tb = self.token_bytes
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(tb):
                raise TokenizerError(f"token id {i} out of range for vocab of {len(tb)}")
            parts.append(tb[i])
        return b"".join(parts).decode("utf-8", errors="replace")

    def token_spans(self, ids: Iterable[int]) -> list[tuple[int, int]]:
        """Byte ``(start, end)`` of every token in the decoded text; specials are empty."""
        spans = []
        pos = 0
        for i in ids:
            n = len(self.token_bytes[i])
            spans.append((pos, pos + n))
            pos += n
        return spans

    def offset_to_token_index(self, text: str, byte_offset: int, add_bos: bool = False) -> int:
        """Index of the first token starting at ``byte_offset`` in ``encode(text, add_bos)``."""
        ids = self.encode(text, add_bos=add_bos)
        first = 1 if add_bos else 0
        spans = self.token_spans(ids)
        if byte_offset == len(text.encode("utf-8")):
            return len(ids)
        for idx in range(first, len(ids)):
            start = spans[idx][0]
            if start == byte_offset:
                return idx
            if start > byte_offset:
                break
        raise TokenizerError(f"byte offset {byte_offset} is not on a token boundary")

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        tb = self.token_bytes
        return {
            "format_version": FORMAT_VERSION,
            "merges": [[tb[a].decode("latin-1"), tb[b].decode("latin-1")] for a, b, _ in self.merges],
            "specials": dict(SPECIALS),
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, data: dict, kernels=None) -> "BPETokenizer":
        if data.get("specials") != SPECIALS:
            raise TokenizerError(f"unexpected specials {data.get('specials')!r}")
        ids = {bytes([i]): i + BYTE_OFFSET for i in range(256)}
        next_id = MIN_VOCAB_SIZE
        merges = []
        for n, pair in enumerate(data.get("merges", [])):
            if len(pair) != 2:
                raise TokenizerError(f"merge {n} is not a pair")
            left, right = (s.encode("latin-1") for s in pair)
            if left not in ids or right not in ids:
                raise TokenizerError(f"merge {n} references unknown token {pair!r}")
            joined = left + right
            if joined not in ids:
                ids[joined] = next_id
                next_id += 1
            merges.append((ids[left], ids[right], ids[joined]))
        tok = cls(merges, kernels=kernels)
        if tok.vocab_size != data.get("vocab_size"):
            raise TokenizerError(f"vocab_size {data.get('vocab_size')} does not match merges ({tok.vocab_size})")
        return tok

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=True, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, kernels=None) -> "BPETokenizer":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise TokenizerError(f"{path}: invalid tokenizer JSON: {exc.msg}") from None
        return cls.from_dict(data, kernels=kernels)


def train_tokenizer(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE) -> BPETokenizer:
    return BPETokenizer.train(corpus, vocab_size)


def encode(t: BPETokenizer, s: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    return t.encode(s, add_bos=add_bos, add_eos=add_eos)


def decode(t: BPETokenizer, ids: Iterable[int]) -> str:
    return t.decode(ids)


def offset_to_token_index(t: BPETokenizer, s: str, byte_offset: int, add_bos: bool = False) -> int:
    return t.offset_to_token_index(s, byte_offset, add_bos=add_bos)
