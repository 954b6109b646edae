"""Prompt templates, rendering and the hashed word tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from moder.errors import ContractError
from moder.numerics.hashing import fnv1a_64

PLACEHOLDER = "{CLS}"

# Sixteen of the standard ImageNet zero-shot prompt templates.
DEFAULT_TEMPLATES = (
    "a photo of a {CLS}.",
    "a bad photo of a {CLS}.",
    "a photo of many {CLS}.",
    "a sculpture of a {CLS}.",
    "a rendering of a {CLS}.",
    "graffiti of a {CLS}.",
    "a cropped photo of the {CLS}.",
    "a tattoo of a {CLS}.",
    "a bright photo of a {CLS}.",
    "a photo of a clean {CLS}.",
    "a photo of a dirty {CLS}.",
    "a dark photo of the {CLS}.",
    "a drawing of a {CLS}.",
    "a photo of my {CLS}.",
    "the plastic {CLS}.",
    "a close-up photo of a {CLS}.",
)

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    def __post_init__(self):
        n = self.text.count(PLACEHOLDER)
        if n != 1:
            raise ContractError(f"template must contain exactly one {PLACEHOLDER}, found {n}: {self.text!r}")

    def render(self, class_name: str) -> str:
        return render_prompt(class_name, self)


CANONICAL_TEMPLATE = PromptTemplate(DEFAULT_TEMPLATES[0])


@dataclass(frozen=True)
class ClassPrompt:
    class_id: int
    class_name: str
    template: PromptTemplate = CANONICAL_TEMPLATE

    def __post_init__(self):
        if self.class_id < 0:
            raise ContractError(f"class_id must be >= 0, got {self.class_id}")
        if not self.class_name.strip():
            raise ContractError("class name must be non-empty")

    @property
    def text(self) -> str:
        return self.template.render(self.class_name)


def render_prompt(class_name: str, template: PromptTemplate | str) -> str:
    if isinstance(template, str):
        template = PromptTemplate(template)
    if not class_name or not class_name.strip():
        raise ContractError("class name must be non-empty")
    return template.text.replace(PLACEHOLDER, class_name)


def token_id(word: str, vocab_size: int) -> int:
    return fnv1a_64(word.encode("utf-8")) % vocab_size


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Lower-case, split on non-alphanumerics, hash each word into ``[0, vocab_size)``."""
    return [token_id(w, vocab_size) for w in _WORD.findall(text.lower())]


def default_templates() -> list[PromptTemplate]:
    return [PromptTemplate(t) for t in DEFAULT_TEMPLATES]


def load_templates(path: str | Path) -> list[PromptTemplate]:
    """One template per line; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(PromptTemplate(line))
        except ContractError as exc:
            raise ContractError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise ContractError(f"{path}: no templates found")
    return out
