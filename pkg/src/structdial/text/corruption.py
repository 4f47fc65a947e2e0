"""Seeded corruptions: MLM masking, utterance permutation and NSP pairing.

All functions are pure in ``(input, seed)``. A seed is an int or a sequence
of non-negative ints (fed to :class:`numpy.random.SeedSequence`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError, SamplingError
from ..lexicon import DEFAULT_LEXICON, GrammarLexicon
from .corpus import DialogueExample, Utterance
from .sequence import MAX_UTTERANCES, InputSequence, assemble
from .vocab import MASK_ID, NUM_RESERVED, STRUCTURAL_IDS, UNK_ID

Seed = int | Sequence[int]

MASK_RATE = 0.15
# keeps floor(K * delta) exact for deltas like 1 - 0.9 = 0.09999999999999998
_FLOOR_SLACK = 1e-9


def _seed_list(seed: Seed) -> list[int]:
    return [int(seed)] if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(_seed_list(seed))


# ---------------------------------------------------------------------------
# MLM


@dataclass
class MaskedTokens:
    seq: InputSequence
    labels: np.ndarray        # original id at selected positions, 0 elsewhere
    positions: tuple[int, ...]

    @property
    def targets(self) -> tuple[int, ...]:
        return tuple(int(self.labels[p]) for p in self.positions)


def maskable_positions(seq: InputSequence) -> np.ndarray:
    ids = seq.ids[: seq.length]
    special = np.isin(ids, list(STRUCTURAL_IDS))
    return np.flatnonzero(~special)


def apply_mlm_mask(seq: InputSequence, mask_rate: float, seed: Seed, vocab_size: int) -> MaskedTokens:
    """Select ``round(mask_rate * n_maskable)`` positions and corrupt them 80/10/10."""
    if not 0.0 <= mask_rate <= 1.0:
        raise InvalidArgumentError(f"mask_rate must be in [0, 1], got {mask_rate}")
    rng = _rng(seed)
    candidates = maskable_positions(seq)
    count = int(math.floor(mask_rate * len(candidates) + 0.5))
    chosen = np.sort(rng.choice(candidates, size=count, replace=False)) if count else np.empty(0, np.int64)
    ids = seq.ids.copy()
    labels = np.zeros_like(ids)
    for pos in chosen:
        labels[pos] = ids[pos]
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9:
            ids[pos] = rng.integers(NUM_RESERVED, vocab_size) if vocab_size > NUM_RESERVED else UNK_ID
    return MaskedTokens(seq.with_ids(ids), labels, tuple(int(p) for p in chosen))


# ---------------------------------------------------------------------------
# Utterance order


@dataclass
class PermutedContext:
    seq: InputSequence
    original: InputSequence
    k_prime: int                    # floor(K * delta), before the skip rule
    window_start: int               # index of the first permuted utterance
    order_labels: tuple[int, ...]   # original window-relative index per permuted slot

    @property
    def skipped(self) -> bool:
        return not self.order_labels

    @property
    def permuted_eou_positions(self) -> tuple[int, ...]:
        return self.seq.eou_positions[self.window_start:] if self.order_labels else ()


def permuted_slot_count(num_utterances: int, delta: float) -> int:
    return int(math.floor(num_utterances * delta + _FLOOR_SLACK))


def _non_identity_permutation(rng: np.random.Generator, k: int) -> np.ndarray:
    """Uniform over the k! - 1 non-identity permutations."""
    identity = np.arange(k)
    while True:
        perm = rng.permutation(k)
        if not np.array_equal(perm, identity):
            return perm


def _reorder(seq: InputSequence, start_utt: int, order: Sequence[int]) -> InputSequence:
    """Rebuild ``seq`` with utterances ``start_utt + order[j]`` placed in slot j."""
    spans = seq.utterance_spans
    win_lo = spans[start_utt][0]
    win_hi = spans[-1][1]
    ids = seq.ids.copy()
    new_spans = list(spans[:start_utt])
    new_eous = list(seq.eou_positions[:start_utt])
    new_words = list(seq.word_positions[:start_utt])
    shift_of = {}
    cursor = win_lo
    for rel in order:
        u = start_utt + int(rel)
        lo, hi = spans[u]
        ids[cursor: cursor + hi - lo] = seq.ids[lo:hi]
        shift = cursor - lo
        shift_of[u] = shift
        new_spans.append((lo + shift, hi + shift))
        new_eous.append(seq.eou_positions[u] + shift)
        new_words.append(tuple(p + shift for p in seq.word_positions[u]))
        cursor += hi - lo
    assert cursor == win_hi

    def move(pos: int) -> int:
        if pos < win_lo:
            return pos
        for u, (lo, hi) in enumerate(spans):
            if lo <= pos < hi:
                return pos + shift_of.get(u, 0)
        return pos

    triplets = tuple(tuple(move(p) for p in t) for t in seq.triplets)
    return replace(seq, ids=ids, utterance_spans=tuple(new_spans), eou_positions=tuple(new_eous),
                   word_positions=tuple(new_words), triplets=triplets)


def permute_utterances(seq: InputSequence, delta: float, seed: Seed) -> PermutedContext:
    """Shuffle the last ``floor(K * delta)`` utterances as whole blocks.

    Fewer than two eligible utterances leaves the sequence untouched and
    yields no order labels.
    """
    if not 0.0 <= delta <= 1.0:
        raise InvalidArgumentError(f"delta must be in [0, 1], got {delta}")
    k = seq.num_utterances
    k_prime = permuted_slot_count(k, delta)
    start = k - k_prime
    if k_prime < 2:
        return PermutedContext(seq, seq, k_prime, k, ())
    perm = _non_identity_permutation(_rng(seed), k_prime)
    return PermutedContext(_reorder(seq, start, perm), seq, k_prime, start,
                           tuple(int(p) for p in perm))


def restore_order(permuted: PermutedContext) -> InputSequence:
    """Undo a permutation using only the permuted sequence and its order labels."""
    if permuted.skipped:
        return permuted.seq
    labels = permuted.order_labels
    slot_of = [labels.index(i) for i in range(len(labels))]
    return _reorder(permuted.seq, permuted.window_start, slot_of)


# ---------------------------------------------------------------------------
# NSP pairs


def true_response(example: DialogueExample) -> tuple[list[Utterance], list[str]]:
    """The example's context and its true response.

    Uses the label-1 candidate when present; otherwise the last utterance is
    split off as the response.
    """
    pos = example.positive_index
    if pos is not None:
        return example.context, example.candidates[pos].words
    if len(example.context) < 2:
        raise SamplingError(f"example {example.id!r} has no positive candidate and a single utterance")
    return example.context[:-1], example.context[-1].words


def make_nsp_pair(
    example: DialogueExample,
    corpus: Sequence[DialogueExample],
    vocab,
    seed: Seed,
    max_len: int = 128,
    max_utterances: int = MAX_UTTERANCES,
    force: int | None = None,
    lexicon: GrammarLexicon = DEFAULT_LEXICON,
) -> tuple[InputSequence, int, str]:
    """Pair the context with its true response (label 1) or another dialogue's (label 0).

    Returns ``(sequence, label, response_source_id)``. ``force`` pins the
    branch (1 positive, 0 negative).
    """
    if len(corpus) < 2:
        raise SamplingError("NSP sampling needs at least two examples")
    rng = _rng(seed)
    label = int(rng.random() < 0.5) if force is None else int(force)
    context, response = true_response(example)
    source = example.id
    if label == 0:
        others = [i for i, ex in enumerate(corpus) if ex.id != example.id]
        if not others:
            raise SamplingError("no other dialogue to draw a negative response from")
        other = corpus[others[int(rng.integers(len(others)))]]
        _, response = true_response(other)
        source = other.id
    seq = assemble(context, response, vocab, max_len, max_utterances, lexicon, example_id=example.id)
    return seq, label, source


# ---------------------------------------------------------------------------
# Full record


@dataclass
class CorruptionRecord:
    seq: InputSequence              # permuted then masked
    order_labels: tuple[int, ...]
    window_start: int
    mlm_labels: np.ndarray
    nsp_label: int | None

    @property
    def k_prime(self) -> int:
        return len(self.order_labels)

    @property
    def permuted_eou_positions(self) -> tuple[int, ...]:
        return self.seq.eou_positions[self.window_start:] if self.order_labels else ()


def corrupt(seq: InputSequence, vocab_size: int, seed: Seed, delta: float = 0.0,
            mask_rate: float = 0.0, nsp_label: int | None = None) -> CorruptionRecord:
    """Permute (when ``delta`` allows) then mask one assembled sequence."""
    perm = permute_utterances(seq, delta, _seed_list(seed) + [2])
    masked = apply_mlm_mask(perm.seq, mask_rate, _seed_list(seed) + [3], vocab_size)
    return CorruptionRecord(masked.seq, perm.order_labels, perm.window_start, masked.labels, nsp_label)
