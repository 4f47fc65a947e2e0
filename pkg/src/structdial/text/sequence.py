"""Assembly of ``[CLS] R [SEP] U1 [EOU] ... UK [EOU] [SEP]`` input sequences."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..errors import CapacityError, InvalidArgumentError
from ..lexicon import DEFAULT_LEXICON, GrammarLexicon
from .corpus import DialogueExample, Triplet, Utterance
from .svo import extract_svo
from .vocab import CLS_ID, EOU_ID, PAD_ID, SEP_ID, Vocab

MAX_UTTERANCES = 20


@dataclass
class InputSequence:
    ids: np.ndarray              # (n,) int64, padded
    attention_mask: np.ndarray   # (n,) 1 on real tokens
    segment_ids: np.ndarray      # (n,) 0 for [CLS] R [SEP], 1 for the context block
    length: int                  # real (unpadded) token count
    response_span: tuple[int, int]
    utterance_spans: tuple[tuple[int, int], ...]  # [start, end) including the [EOU]
    eou_positions: tuple[int, ...]
    word_positions: tuple[tuple[int, ...], ...]   # first-subtoken position per retained word
    triplets: tuple[Triplet, ...]                 # token positions (subj, verb, obj)

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def num_utterances(self) -> int:
        return len(self.eou_positions)

    def with_ids(self, ids: np.ndarray) -> "InputSequence":
        return replace(self, ids=ids)


def _longest_first(lengths: list[int], budget: int) -> list[int]:
    """Drop one word at a time from the longest utterance until ``sum <= budget``.

    Ties go to the earliest utterance.
    """
    lengths = list(lengths)
    excess = sum(lengths) - budget
    while excess > 0:
        longest = max(range(len(lengths)), key=lambda i: (lengths[i], -i))
        if lengths[longest] == 0:
            break
        lengths[longest] -= 1
        excess -= 1
    return lengths


def assemble(
    context: Sequence[Utterance],
    response: Sequence[str],
    vocab: Vocab,
    max_len: int = 128,
    max_utterances: int = MAX_UTTERANCES,
    lexicon: GrammarLexicon = DEFAULT_LEXICON,
    example_id: str = "?",
) -> InputSequence:
    if max_len < 8:
        raise InvalidArgumentError(f"max_len must be >= 8, got {max_len}")
    if not context:
        raise InvalidArgumentError("context must hold at least one utterance")
    fixed = len(response) + 3  # [CLS] R [SEP] ... [SEP]
    if fixed + 1 > max_len:
        raise CapacityError(
            f"max_len {max_len} cannot hold a {len(response)}-word response and one utterance")

    first_kept = max(0, len(context) - max_utterances)
    utts = list(context[first_kept:])
    triplets_by_utt = [
        extract_svo(u.words, u.svo, lexicon, utterance_id=f"{example_id}/{first_kept + i}")
        for i, u in enumerate(utts)
    ]
    # utterances emptied by trimming still cost an [EOU]; drop the oldest if needed
    while fixed + len(utts) > max_len:
        utts.pop(0)
        triplets_by_utt.pop(0)
    lengths = _longest_first([len(u.words) for u in utts], max_len - fixed - len(utts))

    ids = [CLS_ID] + vocab.encode(response) + [SEP_ID]
    response_span = (1, 1 + len(response))
    spans, eous, word_pos, triplets = [], [], [], []
    for u, keep, trips in zip(utts, lengths, triplets_by_utt):
        start = len(ids)
        ids.extend(vocab.encode(u.words[:keep]))
        positions = tuple(start + w for w in range(keep))
        eous.append(len(ids))
        ids.append(EOU_ID)
        spans.append((start, len(ids)))
        word_pos.append(positions)
        for s, v, o in trips:
            if max(s, v, o) < keep:
                triplets.append((positions[s], positions[v], positions[o]))
    ids.append(SEP_ID)
    length = len(ids)

    arr = np.full(max_len, PAD_ID, dtype=np.int64)
    arr[:length] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:length] = 1
    seg = np.zeros(max_len, dtype=np.int64)
    seg[response_span[1] + 1:length] = 1
    return InputSequence(
        ids=arr, attention_mask=mask, segment_ids=seg, length=length,
        response_span=response_span, utterance_spans=tuple(spans),
        eou_positions=tuple(eous), word_positions=tuple(word_pos), triplets=tuple(triplets),
    )


def assemble_sequence(
    example: DialogueExample,
    candidate_index: int,
    vocab: Vocab,
    max_len: int = 128,
    max_utterances: int = MAX_UTTERANCES,
    lexicon: GrammarLexicon = DEFAULT_LEXICON,
) -> InputSequence:
    if not 0 <= candidate_index < len(example.candidates):
        raise InvalidArgumentError(
            f"candidate index {candidate_index} invalid for {len(example.candidates)} candidates")
    return assemble(example.context, example.candidates[candidate_index].words, vocab,
                    max_len, max_utterances, lexicon, example_id=example.id)
