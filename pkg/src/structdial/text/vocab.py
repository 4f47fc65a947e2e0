"""Word-level vocabulary and tokenizer."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..errors import InvalidArgumentError, VocabularyError

PAD, UNK, CLS, SEP, EOU, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOU]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, EOU, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, EOU_ID, MASK_ID = range(len(SPECIAL_TOKENS))
NUM_RESERVED = len(SPECIAL_TOKENS)
# positions the MLM corruption must never touch
STRUCTURAL_IDS = frozenset({PAD_ID, CLS_ID, SEP_ID, EOU_ID})


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:NUM_RESERVED]) != SPECIAL_TOKENS:
            raise InvalidArgumentError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise InvalidArgumentError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(f"id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token(int(i)) for i in ids]


def build_vocab(corpus: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocab:
    """Build a vocabulary from texts or pre-split token streams.

    Ids after the reserved block are assigned by descending frequency, ties
    broken lexicographically.
    """
    if min_count < 1:
        raise InvalidArgumentError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n_streams = 0
    for stream in corpus:
        n_streams += 1
        words = stream.lower().split() if isinstance(stream, str) else list(stream)
        counts.update(words)
    if n_streams == 0:
        raise InvalidArgumentError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS),
        key=lambda w: (-counts[w], w),
    )
    return Vocab(list(SPECIAL_TOKENS) + kept)


@dataclass(frozen=True)
class Tokenized:
    words: list[str]
    tokens: list[str]
    alignment: list[int]  # word index -> index of its first subtoken
    ids: list[int] | None = None


def tokenize(text: str, vocab: Vocab | None = None) -> Tokenized:
    """Lowercase and split on whitespace.

    Every word is a single subtoken, so the alignment is the identity; words
    missing from ``vocab`` become ``[UNK]``.
    """
    words = text.lower().split()
    if vocab is None:
        tokens = list(words)
    else:
        tokens = [w if w in vocab else UNK for w in words]
    ids = vocab.encode(tokens) if vocab is not None else None
    return Tokenized(words=words, tokens=tokens, alignment=list(range(len(words))), ids=ids)
