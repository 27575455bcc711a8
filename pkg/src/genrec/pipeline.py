"""Glue between prompts, the tokenizer and the model's length budget."""

from __future__ import annotations

from typing import Mapping, Sequence

from .prompt import TITLE_JOINER, PromptTemplate, render_prompt, truncate_history
from .tokenizer import EOS_ID, BPETokenizer


class PromptTooLong(ValueError):
    pass


def max_title_tokens(tokenizer: BPETokenizer, titles: Sequence[str]) -> int:
    return max((len(tokenizer.encode(t)) for t in titles), default=0)


def response_reserve(tokenizer: BPETokenizer, catalog: Mapping[str, str]) -> int:
    """Tokens kept free after the prompt: the longest catalog title plus EOS.

    Training and inference both truncate with this budget, so a history is cut
    to the same window whichever title follows it.
    """
    return max_title_tokens(tokenizer, list(catalog.values())) + 1


def build_prompt(
    history_titles: Sequence[str],
    instruction: str,
    tokenizer: BPETokenizer,
    max_len: int,
    reserve: int,
) -> str:
    """Render the prompt, dropping the oldest titles until BOS + prompt + ``reserve`` tokens fit."""

    def fits(titles: Sequence[str]) -> bool:
        return 1 + len(tokenizer.encode(render_prompt(instruction, TITLE_JOINER.join(titles)))) + reserve <= max_len

    if not history_titles:
        raise ValueError("empty history")
    kept = truncate_history(history_titles, fits)
    if not fits(kept):
        raise PromptTooLong(f"prompt does not fit in {max_len} tokens even with a single history title")
    return render_prompt(instruction, TITLE_JOINER.join(kept))


def encode_prompt(tokenizer: BPETokenizer, prompt: str) -> list[int]:
    return tokenizer.encode(prompt, add_bos=True)


def encode_training_example(
    history: Sequence[str],
    target: str,
    catalog: Mapping[str, str],
    template: PromptTemplate,
    tokenizer: BPETokenizer,
    max_len: int,
    reserve: int | None = None,
) -> tuple[list[int], int]:
    """Token ids of ``BOS prompt title EOS`` and the index of the first response token.

    ``reserve`` defaults to the length of this title plus EOS.
    """
    title = catalog[target]
    title_ids = tokenizer.encode(title)
    titles = [catalog[i] for i in history]
    if reserve is None:
        reserve = len(title_ids) + 1
    elif reserve < len(title_ids) + 1:
        raise ValueError(f"reserve {reserve} is shorter than title {title!r} plus EOS")
    prompt = build_prompt(titles, template.instruction_text, tokenizer, max_len, reserve)
    prompt_ids = encode_prompt(tokenizer, prompt)
    return prompt_ids + title_ids + [EOS_ID], len(prompt_ids)


def inference_prompt(
    history: Sequence[str],
    catalog: Mapping[str, str],
    template: PromptTemplate,
    tokenizer: BPETokenizer,
    max_len: int,
    reserve: int,
) -> str:
    return build_prompt([catalog[i] for i in history], template.instruction_text, tokenizer, max_len, reserve)


__all__ = [
    "PromptTooLong",
    "build_prompt",
    "encode_prompt",
    "encode_training_example",
    "inference_prompt",
    "max_title_tokens",
    "response_reserve",
]
