"""Discriminative-triad parsing over the closed query grammar, and triad embeddings.

Grammar (tokens are lower-case words)::

    query    := LOC | np postmod*
    np       := [ART] LOC* ATTR* NOUN+          head noun = rightmost NOUN
    postmod  := ["and"] ("in" ATTR | RELPHRASE np)

A query with no discriminative material yields ``(T, T, SELF)``; a bare
location word yields ``(UKN, UKN, loc)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scene import ATTRIBUTES, CATEGORIES, LOCATIONS, RELATION_PHRASES, SELF, UKN

Triad = tuple[str, str, str]

ARTICLES = ("the", "a", "an")
NOUNS = CATEGORIES
# token sequence -> discriminative unit; longest match wins
PHRASES: dict[tuple[str, ...], str] = {
    **{words: rel for rel, words in RELATION_PHRASES.items()},
    ("holding",): "holding",
    ("standing", "on"): "on",
    ("on",): "on",
    ("in",): "in",
}
DISCRIMINATIVE = tuple(sorted(set(PHRASES.values())))
FILLERS = ("of", "than", "and", "standing")


def vocabulary() -> tuple[str, ...]:
    """Every token the grammar and the triads can produce, in a fixed order."""
    words = [*NOUNS, *ATTRIBUTES, *LOCATIONS, *DISCRIMINATIVE, *ARTICLES, *FILLERS, UKN, SELF]
    return tuple(dict.fromkeys(words))


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token {position}")
        self.position = position


def _tokens(query: str | Sequence[str]) -> list[str]:
    if isinstance(query, str):
        query = query.split()
    return [t.lower() for t in query]


class _Parser:
    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.pos = 0

    def peek(self, k: int = 0) -> str | None:
        i = self.pos + k
        return self.toks[i] if i < len(self.toks) else None

    def noun_phrase(self) -> tuple[str, list[Triad]]:
        if self.peek() in ARTICLES:
            self.pos += 1
        locs, attrs, nouns = [], [], []
        while self.peek() in LOCATIONS:
            locs.append(self.toks[self.pos])
            self.pos += 1
        while self.peek() in ATTRIBUTES:
            attrs.append(self.toks[self.pos])
            self.pos += 1
        while self.peek() in NOUNS:
            nouns.append(self.toks[self.pos])
            self.pos += 1
        if not nouns:
            raise ParseError(f"expected a noun, found {self.peek()!r}", self.pos)
        head = nouns[-1]
        return head, [(head, head, d) for d in (*locs, *attrs)]

    def relation_phrase(self) -> str | None:
        for length in (2, 1):
            words = tuple(self.toks[self.pos:self.pos + length])
            if len(words) == length and words in PHRASES:
                self.pos += length
                return PHRASES[words]
        return None

    def postmodifier(self, target: str) -> list[Triad]:
        start = self.pos
        # "in white": attribute of the target, unless a noun phrase follows
        if self.peek() == "in" and self.peek(1) in ATTRIBUTES:
            j = self.pos + 2
            while j < len(self.toks) and self.toks[j] in ATTRIBUTES:
                j += 1
            if j >= len(self.toks) or self.toks[j] not in NOUNS:
                attrs = self.toks[self.pos + 1:j]
                self.pos = j
                return [(target, target, a) for a in attrs]
        rel = self.relation_phrase()
        if rel is None:
            raise ParseError(f"unexpected token {self.peek()!r}", start)
        ref, ref_triads = self.noun_phrase()
        return [(target, ref, rel), *ref_triads]

    def query(self) -> list[Triad]:
        if not self.toks:
            raise ParseError("empty query", 0)
        if len(self.toks) == 1 and self.toks[0] in LOCATIONS:
            return [(UKN, UKN, self.toks[0])]
        target, triads = self.noun_phrase()
        while self.peek() is not None:
            if self.peek() == "and":
                self.pos += 1
                if self.peek() is None:
                    raise ParseError("dangling conjunction", self.pos)
            triads.extend(self.postmodifier(target))
        return triads or [(target, target, SELF)]


def parse(query: str | Sequence[str]) -> list[Triad]:
    """Parse a query into discriminative triads in textual order.

    >>> parse("cat above a shelf")
    [('cat', 'shelf', 'above')]
    """
    return _Parser(_tokens(query)).query()


@dataclass
class EmbeddingTable:
    tokens: tuple[str, ...]
    vectors: np.ndarray

    @classmethod
    def seeded(cls, seed: int, dim: int = 32, tokens: Iterable[str] | None = None) -> "EmbeddingTable":
        toks = tuple(tokens) if tokens is not None else vocabulary()
        rng = np.random.default_rng(seed)
        return cls(toks, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(toks), dim)))

    def __post_init__(self) -> None:
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __getitem__(self, token: str) -> np.ndarray:
        try:
            return self.vectors[self.index[token]]
        except KeyError:
            raise KeyError(f"token {token!r} missing from embedding table") from None


def embed(triads: Sequence[Triad], table: EmbeddingTable, M: int = 2) -> np.ndarray:
    """Concatenate per-triad blocks (target, reference, discriminative embeddings).

    Fewer than ``M`` triads are padded by repeating the first block; extra
    triads beyond ``M`` are dropped in parse order.
    """
    if not triads:
        raise ValueError("at least one triad is required")
    if M < 1:
        raise ValueError("M must be >= 1")
    blocks = [np.concatenate([table[t], table[r], table[d]]) for t, r, d in triads[:M]]
    blocks += [blocks[0]] * (M - len(blocks))
    return np.concatenate(blocks)


def bag_of_tokens(tokens: Sequence[str], table: EmbeddingTable, M: int = 2) -> np.ndarray:
    """Mean raw-token embedding tiled to the triad-feature width (the no-triad ablation)."""
    if not tokens:
        raise ValueError("empty query")
    mean = np.mean([table[t] for t in _tokens(tokens)], axis=0)
    return np.tile(mean, 3 * M)
