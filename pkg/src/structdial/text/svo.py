"""Subject-verb-object triplets at the word level."""

from __future__ import annotations

from typing import Sequence

from ..errors import DataError
from ..lexicon import DEFAULT_LEXICON, GrammarLexicon
from .corpus import Triplet

_PUNCT = ".,;:!?"


def _clauses(words: Sequence[str], lexicon: GrammarLexicon) -> list[tuple[int, int]]:
    spans, start = [], 0
    for i, w in enumerate(words):
        if w in lexicon.clause_breaks:
            spans.append((start, i))
            start = i + 1
        elif w and w[-1] in _PUNCT:
            spans.append((start, i + 1))
            start = i + 1
    spans.append((start, len(words)))
    return [s for s in spans if s[1] > s[0]]


def _match_clause(words: list[str], lo: int, hi: int, lexicon: GrammarLexicon) -> Triplet | None:
    nouns = lexicon.nouns
    for v in range(lo, hi):
        if words[v] not in lexicon.verbs:
            continue
        s = v - 1
        if s < lo or words[s] not in nouns:
            continue
        o = v + 1
        if o < hi and words[o] in lexicon.determiners:
            o += 1
        if o < hi and words[o] in nouns:
            return (s, v, o)
    return None


def extract_svo(
    words: Sequence[str],
    gold: Sequence[Sequence[int]] | None = None,
    lexicon: GrammarLexicon = DEFAULT_LEXICON,
    utterance_id: str = "?",
) -> list[Triplet]:
    """Word-index ``(subject, verb, object)`` triplets for one utterance.

    Gold annotations are validated and returned as given. Otherwise the
    pattern ``[DET] NOUN VERB [DET] NOUN`` is matched, first hit per clause.
    """
    if gold is not None:
        out = []
        for t in gold:
            if len(t) != 3 or any(not 0 <= int(i) < len(words) for i in t):
                raise DataError(
                    f"utterance {utterance_id}: svo annotation {tuple(t)} out of range "
                    f"for {len(words)} words")
            out.append((int(t[0]), int(t[1]), int(t[2])))
        return out
    clean = [w.rstrip(_PUNCT) for w in words]
    found = []
    for lo, hi in _clauses(words, lexicon):
        hit = _match_clause(clean, lo, hi, lexicon)
        if hit is not None:
            found.append(hit)
    return found
