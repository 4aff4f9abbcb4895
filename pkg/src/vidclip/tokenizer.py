"""Word-level tokenizer over a closed class-name vocabulary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyClassSet, TokenOverflow, UnknownToken

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
SPECIALS = (PAD, BOS, EOS)
DEFAULT_TEMPLATE = "a photo of a <category>"
CATEGORY_SLOT = "<category>"
CLIP_MAX_TOKENS = 77


def normalize(text: str) -> list[str]:
    return text.lower().split()


def render_prompt(class_name: str, template: str = DEFAULT_TEMPLATE) -> str:
    return template.replace(CATEGORY_SLOT, " ".join(normalize(class_name)))


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    eos_index: int

    @property
    def attention_length(self) -> int:
        return self.eos_index + 1


@dataclass(frozen=True)
class Vocabulary:
    """Immutable word -> id table. Specials take ids 0..2, words follow in sorted order."""

    words: tuple[str, ...]
    template: str = DEFAULT_TEMPLATE
    max_tokens: int = 16

    def __post_init__(self):
        if self.max_tokens > CLIP_MAX_TOKENS:
            raise TokenOverflow(f"max_tokens={self.max_tokens} exceeds {CLIP_MAX_TOKENS}")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(SPECIALS + self.words)})

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id_of(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownToken(word) from None

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def missing_words(self, class_names) -> set[str]:
        needed = set()
        for name in class_names:
            needed.update(normalize(render_prompt(name, self.template)))
        return {w for w in needed if w not in self._index}

    def to_dict(self) -> dict:
        return {"words": list(self.words), "template": self.template, "max_tokens": self.max_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["words"]), d["template"], int(d["max_tokens"]))


def build_tokenizer(class_names, template: str = DEFAULT_TEMPLATE, max_tokens: int = 16) -> Vocabulary:
    """Build a vocabulary covering the template and every class name.

    Raises TokenOverflow if any rendered prompt (plus BOS/EOS) does not fit in
    ``max_tokens``.
    """
    class_names = list(class_names)
    if not class_names:
        raise EmptyClassSet("at least one class name is required")
    words = set(w for w in normalize(template) if w != CATEGORY_SLOT)
    for name in class_names:
        words.update(normalize(name))
    vocab = Vocabulary(tuple(sorted(words)), template, max_tokens)
    for name in class_names:
        n = len(normalize(render_prompt(name, template)))
        if n + 2 > max_tokens:
            raise TokenOverflow(f"prompt for {name!r} needs {n + 2} tokens > {max_tokens}")
    return vocab


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    words = normalize(text)
    if len(words) + 2 > vocab.max_tokens:
        raise TokenOverflow(f"{len(words) + 2} tokens > max_tokens={vocab.max_tokens}")
    ids = np.full(vocab.max_tokens, vocab.pad_id, dtype=np.int64)
    ids[0] = vocab.bos_id
    for i, w in enumerate(words, start=1):
        ids[i] = vocab.id_of(w)
    eos = len(words) + 1
    ids[eos] = vocab.eos_id
    return TokenSequence(ids, eos)


def tokenize_classes(class_names, vocab: Vocabulary) -> list[TokenSequence]:
    return [tokenize(render_prompt(name, vocab.template), vocab) for name in class_names]
