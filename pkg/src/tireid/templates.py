"""Prompt templates and reply parsing for the multimodal oracle.

Five template kinds drive the whole interaction surface: anchor
localization (loc), person-attribute VQA (vqa), answer aggregation (aggr),
sub-sentence decomposition (dec), and style rewriting (rwt). The default
wordings below are authored in this repo and can be overridden by dropping
``<kind>.txt`` files into a template directory; each kind has a fixed set
of placeholders that must survive any override.

Replies are demanded in machine-readable shapes (a leading Yes/No token,
numbered lists) and parsed strictly: anything else raises ProtocolError
with the raw reply attached, never a coerced verdict.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import ProtocolError, ValidationError


class PromptKind(str, Enum):
    LOC = "loc"
    VQA = "vqa"
    AGGR = "aggr"
    DEC = "dec"
    RWT = "rwt"


REQUIRED_PLACEHOLDERS: dict[PromptKind, frozenset[str]] = {
    PromptKind.LOC: frozenset({"query"}),
    PromptKind.VQA: frozenset({"questions"}),
    PromptKind.AGGR: frozenset({"answers", "query"}),
    PromptKind.DEC: frozenset({"text"}),
    PromptKind.RWT: frozenset({"text", "m"}),
}

IMAGE_KINDS = frozenset({PromptKind.LOC, PromptKind.VQA})


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    template_text: str
    attaches_image: bool

    def __post_init__(self):
        expected_image = self.kind in IMAGE_KINDS
        if self.attaches_image != expected_image:
            raise ValidationError(
                f"{self.kind.value} template must have attaches_image={expected_image}"
            )
        found = {
            name
            for _, name, _, _ in string.Formatter().parse(self.template_text)
            if name
        }
        missing = REQUIRED_PLACEHOLDERS[self.kind] - found
        if missing:
            raise ValidationError(
                f"{self.kind.value} template missing placeholders: {sorted(missing)}"
            )

    def render(self, **values) -> str:
        try:
            return self.template_text.format(**values)
        except (KeyError, IndexError) as exc:
            raise ValidationError(
                f"{self.kind.value} template render failed: {exc}"
            ) from exc


@dataclass(frozen=True)
class QuestionSet:
    """Ordered attribute questions posed to the oracle about a person image."""

    questions: tuple[str, ...]

    def __post_init__(self):
        if not self.questions:
            raise ValidationError("question set must not be empty")
        for q in self.questions:
            if not q.endswith("?"):
                raise ValidationError(f"question must end with '?': {q!r}")

    def as_numbered_block(self) -> str:
        return "\n".join(f"{i + 1}. {q}" for i, q in enumerate(self.questions))

    def __len__(self) -> int:
        return len(self.questions)


DEFAULT_QUESTIONS = QuestionSet(
    (
        "What is the person's gender?",
        "What does the person's hair look like?",
        "What is the person wearing on the upper body?",
        "What is the person wearing on the lower body?",
        "What shoes is the person wearing?",
        "What objects is the person carrying or holding?",
        "What does the background of the image look like?",
    )
)

_DEFAULT_TEXTS: dict[PromptKind, str] = {
    PromptKind.LOC: (
        'Text description: "{query}"\n'
        "Can this text accurately describe the image? Answer Yes or No."
    ),
    PromptKind.VQA: (
        "Look at the person in the image and answer each question one by one.\n"
        "Reply as a numbered list with one answer per question.\n"
        "Questions:\n{questions}"
    ),
    PromptKind.AGGR: (
        "Merge the original description and the attribute answers below into "
        "one fluent and concise description of the same person. Reply with the "
        "merged description only.\n"
        'Original description: "{query}"\n'
        "Attribute answers: {answers}"
    ),
    PromptKind.DEC: (
        "Decompose the following person description into independent "
        "sub-sentences, each describing a single attribute. Reply as a "
        "numbered list with one sub-sentence per item.\n"
        'Description: "{text}"'
    ),
    PromptKind.RWT: (
        "Rewrite the following sentence into {m} sentences with different "
        "styles but exactly the same meaning. Reply as a numbered list with "
        "exactly {m} items.\n"
        'Sentence: "{text}"'
    ),
}


def default_templates() -> dict[PromptKind, PromptTemplate]:
    return {
        kind: PromptTemplate(kind, text, attaches_image=kind in IMAGE_KINDS)
        for kind, text in _DEFAULT_TEXTS.items()
    }


def load_templates(template_dir: str | Path | None) -> dict[PromptKind, PromptTemplate]:
    """Defaults, overridden per kind by ``<kind>.txt`` files when present."""
    templates = default_templates()
    if template_dir is None:
        return templates
    base = Path(template_dir)
    for kind in PromptKind:
        candidate = base / f"{kind.value}.txt"
        if candidate.exists():
            templates[kind] = PromptTemplate(
                kind,
                candidate.read_text(encoding="utf-8"),
                attaches_image=kind in IMAGE_KINDS,
            )
    return templates


_LEADING_TOKEN = re.compile(r"[^A-Za-z]*([A-Za-z]+)")
_LIST_ITEM_SPLIT = re.compile(r"(?:^|\s)\d+[.)]\s+")


def parse_verdict(raw_reply: str) -> bool:
    """Case-insensitive leading-token Yes/No; anything else is a ProtocolError."""
    match = _LEADING_TOKEN.match(raw_reply or "")
    token = match.group(1).lower() if match else ""
    if token == "yes":
        return True
    if token == "no":
        return False
    raise ProtocolError(
        f"expected a leading Yes/No token, got {raw_reply!r}", raw_reply=raw_reply
    )


def parse_numbered_list(raw_reply: str) -> list[str]:
    """Items of a '1. ... 2. ...' reply; at least one item or ProtocolError."""
    parts = [p.strip() for p in _LIST_ITEM_SPLIT.split(raw_reply or "")]
    items = [p for p in parts if p]
    if not items:
        raise ProtocolError(
            f"expected a numbered list, got {raw_reply!r}", raw_reply=raw_reply
        )
    return items
