"""Shared word-level tokenizer and vocabulary.

Every module tokenizes the same way: lowercase, punctuation-separating,
apostrophes kept inside words so contractions stay single tokens.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .validation import check_positive_int, ensure

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")

PAD, UNK, CLS, SEP, MASK = "[pad]", "[unk]", "[cls]", "[sep]", "[mask]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a word character."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    """Token/id bijection with the five special ids fixed at 0..4."""

    token_to_id: dict[str, int]
    min_frequency: int = 1
    id_to_token: tuple[str, ...] = field(init=False, repr=False)

    def __post_init__(self):
        for i, tok in enumerate(SPECIALS):
            ensure(self.token_to_id.get(tok) == i, f"special {tok!r} must map to id {i}")
        inverse = sorted(self.token_to_id, key=self.token_to_id.get)
        ensure(len(inverse) == len(set(self.token_to_id.values())), "ids must be unique")
        object.__setattr__(self, "id_to_token", tuple(inverse))

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID)


def build_vocab(lines: Iterable[str], min_frequency: int = 1) -> Vocab:
    """Count tokens over ``lines`` and keep those with count >= min_frequency.

    Kept tokens are ordered by (count desc, token asc) after the specials, so
    the result is invariant to the order of the input lines.
    """
    check_positive_int(min_frequency, "min_frequency")
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        counts.update(tokenize(line))
    ensure(n_lines > 0, "cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_frequency and t not in SPECIALS),
        key=lambda t: (-counts[t], t),
    )
    mapping = {tok: i for i, tok in enumerate(SPECIALS)}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocab(token_to_id=mapping, min_frequency=min_frequency)
