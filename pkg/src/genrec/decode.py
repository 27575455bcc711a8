"""Catalog-constrained generation of ranked item lists."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import torch

from .backbone import Decoder
from .pipeline import PromptTooLong
from .tokenizer import BOS_ID, EOS_ID, BPETokenizer

log = logging.getLogger(__name__)


def default_beam_width(k: int) -> int:
    return max(2 * k, 20)


class _Node:
    __slots__ = ("children", "item_id", "title")

    def __init__(self) -> None:
        self.children: dict[int, _Node] = {}
        self.item_id: str | None = None
        self.title: str | None = None


class TitleTrie:
    """Prefix tree over tokenized titles.  Terminal nodes carry the resolved item id."""

    def __init__(self) -> None:
        self.root = _Node()
        self.num_nodes = 1
        self.paths: dict[str, tuple[int, ...]] = {}
        self.item_for_title: dict[str, str] = {}
        self.max_depth = 0

    def insert(self, path: Sequence[int], item_id: str, title: str) -> None:
        if not path:
            raise ValueError(f"title {title!r} encodes to no tokens")
        node = self.root
        for tok in path:
            nxt = node.children.get(tok)
            if nxt is None:
                nxt = node.children[tok] = _Node()
                self.num_nodes += 1
            node = nxt
        if node.item_id is not None:
            raise ValueError(f"titles {node.title!r} and {title!r} share a token path")
        node.item_id, node.title = item_id, title
        self.paths[title] = tuple(path)
        self.item_for_title[title] = item_id
        self.max_depth = max(self.max_depth, len(path))

    def node(self, path: Sequence[int]) -> _Node:
        node = self.root
        for tok in path:
            try:
                node = node.children[tok]
            except KeyError:
                raise KeyError(f"{list(path)} is not a prefix of any catalog title") from None
        return node

    def allowed_next(self, path: Sequence[int]) -> tuple[frozenset[int], bool]:
        node = self.node(path)
        return frozenset(node.children), node.item_id is not None

    def terminals(self) -> Iterator[tuple[tuple[int, ...], str, str]]:
        stack: list[tuple[tuple[int, ...], _Node]] = [((), self.root)]
        while stack:
            path, node = stack.pop()
            if node.item_id is not None:
                yield path, node.item_id, node.title
            for tok in sorted(node.children, reverse=True):
                stack.append((path + (tok,), node.children[tok]))

    def __len__(self) -> int:
        return len(self.paths)


def build_trie(catalog: Mapping[str, str], tokenizer: BPETokenizer, popularity: Mapping[str, int] | None = None) -> TitleTrie:
    """One terminal per distinct title.

    Ids sharing a title resolve to the most popular one (ties: smallest id).
    """
    if not catalog:
        raise ValueError("cannot build a trie over an empty catalog")
    pop = popularity or {}
    by_title: dict[str, list[str]] = {}
    for item_id, title in catalog.items():
        by_title.setdefault(title, []).append(item_id)
    trie = TitleTrie()
    for title in sorted(by_title):
        chosen = min(by_title[title], key=lambda i: (-pop.get(i, 0), i))
        trie.insert(tokenizer.encode(title), chosen, title)
    return trie


def allowed_next(trie: TitleTrie, path: Sequence[int]) -> tuple[frozenset[int], bool]:
    return trie.allowed_next(path)


# --------------------------------------------------------------------------
# ranking


class Scored(NamedTuple):
    item_id: str
    score: float
    """Mean log-probability per token, termination included."""
    log_prob: float
    num_tokens: int


def rank_key(s: Scored) -> tuple:
    """Higher normalized score, then higher raw log-prob, then smaller item id."""
    return (-s.score, -s.log_prob, s.item_id)


@dataclass
class RankedList:
    items: list[Scored] = field(default_factory=list)
    warning: str | None = None

    def item_ids(self) -> list[str]:
        return [s.item_id for s in self.items]

    def __len__(self) -> int:
        return len(self.items)


def _check_prompt(model: Decoder, prompt_ids: Sequence[int]) -> None:
    if len(prompt_ids) >= model.config.max_len:
        raise PromptTooLong(f"prompt has {len(prompt_ids)} tokens; max_len is {model.config.max_len}")


@torch.no_grad()
def recommend_topk(
    model: Decoder,
    tokenizer: BPETokenizer,
    trie: TitleTrie,
    prompt_text: str,
    k: int,
    beam_width: int | None = None,
) -> RankedList:
    """Beam search restricted to trie paths.

    At every node the beam may stop (scored by the EOS log-probability) if the
    node ends a title, or continue along any child token.  Candidates compete on
    cumulative log-probability for ``beam_width`` slots; finished titles are
    ranked by length-normalized score.
    """
    beam_width = default_beam_width(k) if beam_width is None else beam_width
    if k < 1 or beam_width < k:
        raise ValueError(f"need 1 <= k <= beam_width, got k={k}, beam_width={beam_width}")
    was_training = model.training
    model.eval()
    prompt_ids = [BOS_ID] + tokenizer.encode(prompt_text)
    _check_prompt(model, prompt_ids)
    max_len = model.config.max_len

    beams: list[tuple[tuple[int, ...], float, _Node]] = [((), 0.0, trie.root)]
    finished: list[Scored] = []
    while beams:
        ids = torch.tensor([prompt_ids + list(path) for path, _, _ in beams], dtype=torch.long)
        logp = torch.log_softmax(model(ids)[:, -1, :], dim=-1).tolist()
        candidates = []
        for row, (path, score, node) in enumerate(beams):
            lp = logp[row]
            if node.item_id is not None:
                candidates.append((score + lp[EOS_ID], path, None, node))
            if len(prompt_ids) + len(path) < max_len:
                for tok, child in node.children.items():
                    candidates.append((score + lp[tok], path + (tok,), child, node))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2] is not None))
        beams = []
        for total, path, child, node in candidates[:beam_width]:
            if child is None:
                n = len(path) + 1
                finished.append(Scored(node.item_id, total / n, total, n))
            else:
                beams.append((path, total, child))
    model.train(was_training)

    finished.sort(key=rank_key)
    ranked, seen = [], set()
    for s in finished:
        if s.item_id not in seen:
            seen.add(s.item_id)
            ranked.append(s)
        if len(ranked) == k:
            break
    warning = None
    if len(ranked) < k:
        warning = f"only {len(ranked)} of {k} beams finished"
        log.warning(warning)
    return RankedList(ranked, warning)


@torch.no_grad()
def score_titles(
    model: Decoder,
    tokenizer: BPETokenizer,
    prompt_text: str,
    titles: Sequence[str],
    trie: TitleTrie | None = None,
) -> list[Scored]:
    """Exact, exhaustive scoring of each title as the response to ``prompt_text``.

    Uses the same normalization as :func:`recommend_topk`: the summed
    log-probability of the title tokens plus EOS, divided by that token count.
    Titles are padded into one batch; padding sits after every scored position.
    """
    if not titles:
        return []
    was_training = model.training
    model.eval()
    prompt_ids = [BOS_ID] + tokenizer.encode(prompt_text)
    _check_prompt(model, prompt_ids)
    paths = []
    for t in titles:
        if trie is not None:
            if t not in trie.paths:
                raise KeyError(f"title {t!r} not in catalog")
            paths.append(list(trie.paths[t]))
        else:
            paths.append(tokenizer.encode(t))
    width = len(prompt_ids) + max(len(p) for p in paths)
    if width > model.config.max_len:
        raise PromptTooLong(f"prompt plus title needs {width} tokens; max_len is {model.config.max_len}")
    ids = torch.zeros((len(paths), width), dtype=torch.long)
    for r, p in enumerate(paths):
        ids[r, : len(prompt_ids) + len(p)] = torch.tensor(prompt_ids + p)
    logp = torch.log_softmax(model(ids), dim=-1)
    out = []
    base = len(prompt_ids) - 1
    for r, (t, p) in enumerate(zip(titles, paths)):
        targets = p + [EOS_ID]
        rows = logp[r, base : base + len(targets)]
        total = 0.0
        for lp in rows.gather(1, torch.tensor(targets).unsqueeze(1)).squeeze(1).tolist():
            total += lp
        item = trie.item_for_title[t] if trie is not None else t
        out.append(Scored(item, total / len(targets), total, len(targets)))
    model.train(was_training)
    return out


def score_title(model: Decoder, tokenizer: BPETokenizer, prompt_text: str, title: str, trie: TitleTrie | None = None) -> float:
    return score_titles(model, tokenizer, prompt_text, [title], trie)[0].score


def exhaustive_ranking(model: Decoder, tokenizer: BPETokenizer, trie: TitleTrie, prompt_text: str) -> list[Scored]:
    return sorted(score_titles(model, tokenizer, prompt_text, list(trie.paths), trie), key=rank_key)


# --------------------------------------------------------------------------
# prediction files


def write_predictions(path: str | Path, predictions: Iterable[tuple[str, RankedList]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user_id, ranked in predictions:
            items = [{"item_id": s.item_id, "score": s.score} for s in ranked.items]
            fh.write(json.dumps({"items": items, "user_id": user_id}, sort_keys=True, ensure_ascii=False) + "\n")
