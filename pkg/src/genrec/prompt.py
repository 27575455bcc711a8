"""Instruction / input / output formatting of user histories."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

TITLE_JOINER = ", "

INSTRUCTION_HEADER = "### Instruction:\n"
INPUT_HEADER = "\n### Input:\n"
RESPONSE_HEADER = "\n### Response:\n"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    instruction_text: str
    domain: str = "movie"

    def __post_init__(self) -> None:
        if not self.instruction_text.strip():
            raise ValueError("instruction_text must be non-empty")
        if "{" in self.instruction_text or "}" in self.instruction_text:
            raise ValueError("instruction_text must not contain placeholders")


# Only entry 0 is the published instruction; the rest are our own phrasings.
_MOVIE = (
    "Given the movie viewing habits, what is the most probable movie they will choose to watch next?",
    "Based on the movies this user has watched so far, which movie are they most likely to watch next?",
    "Here is a list of films a viewer watched in order. Predict the next film they will watch.",
    "Considering this person's film history, recommend the single movie they will most likely see next.",
)
_NEUTRAL = (
    "Given the user's interaction history, what is the most probable item they will interact with next?",
    "Based on the items this user has engaged with so far, which item are they most likely to choose next?",
    "Here is a list of products a customer interacted with in order. Predict the next product.",
    "Considering this customer's purchase history, recommend the single item they will most likely buy next.",
)


def default_template_bank() -> list[PromptTemplate]:
    """Movie phrasings (ids 0-3) followed by domain-neutral ones (ids 4-7)."""
    bank = [PromptTemplate(i, text, "movie") for i, text in enumerate(_MOVIE)]
    bank += [PromptTemplate(len(_MOVIE) + i, text, "generic") for i, text in enumerate(_NEUTRAL)]
    return bank


def templates_for(domain: str, bank: Sequence[PromptTemplate] | None = None) -> list[PromptTemplate]:
    bank = default_template_bank() if bank is None else bank
    chosen = [t for t in bank if t.domain == domain]
    if not chosen:
        raise ValueError(f"no templates for domain {domain!r}")
    return chosen


@dataclass(frozen=True)
class FormattedExample:
    instruction: str
    input: str
    output: str
    user_id: str = ""
    template_id: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


class RenderedExample(NamedTuple):
    text: str
    output_offset: int
    """UTF-8 byte offset where the response begins."""

    def output_text(self) -> str:
        return self.text.encode("utf-8")[self.output_offset :].decode("utf-8")


def _titles(ids: Iterable[str], catalog: Mapping[str, str]) -> list[str]:
    out = []
    for item_id in ids:
        try:
            out.append(catalog[item_id])
        except KeyError:
            raise KeyError(f"item id {item_id!r} not in catalog") from None
    return out


def format_example(
    history: Sequence[str],
    target: str,
    catalog: Mapping[str, str],
    template: PromptTemplate,
    user_id: str = "",
) -> FormattedExample:
    if not history:
        raise ValueError("history must be non-empty")
    titles = _titles(history, catalog)
    (output,) = _titles([target], catalog)
    return FormattedExample(template.instruction_text, TITLE_JOINER.join(titles), output, user_id, template.template_id)


def render_prompt(instruction: str, input_text: str) -> str:
    """Everything up to and including the response header."""
    return INSTRUCTION_HEADER + instruction + INPUT_HEADER + input_text + RESPONSE_HEADER


def render_for_training(ex: FormattedExample) -> RenderedExample:
    """Serialize a triple into one string; the EOS token is appended at tokenization.

    The returned offset is the byte position of the first response byte, so
    ``text.encode()[offset:]`` is exactly ``ex.output``.
    """
    prompt = render_prompt(ex.instruction, ex.input)
    return RenderedExample(prompt + ex.output, len(prompt.encode("utf-8")))


def truncate_history(titles: Sequence[str], fits: Callable[[Sequence[str]], bool]) -> list[str]:
    """Drop the fewest oldest titles so that ``fits`` holds.  At least one title is kept.

    ``fits`` must be monotone: if a suffix fits, every shorter suffix fits too.
    """
    titles = list(titles)
    if len(titles) <= 1 or fits(titles):
        return titles
    lo, hi = 1, len(titles) - 1
    if not fits(titles[hi:]):
        return titles[hi:]
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(titles[mid:]):
            hi = mid
        else:
            lo = mid + 1
    return titles[lo:]


def assign_templates(
    examples: Sequence[tuple[str, Sequence[str], str]],
    bank: Sequence[PromptTemplate],
    seed: int,
    catalog: Mapping[str, str],
) -> list[FormattedExample]:
    """Format ``(user_id, history, target)`` triples with a seeded random template each."""
    if not bank:
        raise ValueError("template bank is empty")
    rng = random.Random(seed)
    out = []
    for user_id, history, target in examples:
        template = bank[rng.randrange(len(bank))]
        out.append(format_example(history, target, catalog, template, user_id))
    return out


def write_formatted(path: str | Path, examples: Iterable[FormattedExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_formatted(path: str | Path) -> list[FormattedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(FormattedExample(**json.loads(line)))
    return out
