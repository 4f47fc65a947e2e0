"""Held-out probes of what the auxiliary objectives teach the encoder."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..model import DialogueModel
from ..numerics import cosine_similarity
from ..text.corpus import DialogueExample
from ..text.corruption import corrupt, true_response
from ..text.sequence import assemble
from ..text.vocab import Vocab


def _sequences(examples: Sequence[DialogueExample], vocab: Vocab, max_len: int, max_utterances: int):
    for ex in examples:
        context, response = true_response(ex)
        yield assemble(context, response, vocab, max_len, max_utterances, example_id=ex.id)


@torch.no_grad()
def uor_accuracy(model: DialogueModel, vocab: Vocab, examples: Sequence[DialogueExample], delta: float,
                 seed: int = 0, max_len: int = 128, max_utterances: int = 20, batch_size: int = 64) -> float:
    """Per-slot order accuracy on freshly permuted contexts (argmax over the first K' classes)."""
    records = [corrupt(seq, len(vocab), [seed, i], delta)
               for i, seq in enumerate(_sequences(examples, vocab, max_len, max_utterances))]
    records = [r for r in records if r.k_prime >= 2]
    hits = total = 0
    model.eval()
    for lo in range(0, len(records), batch_size):
        batch = records[lo: lo + batch_size]
        H = model.hidden_states(batch)
        for i, r in enumerate(batch):
            logits = model.heads.uor(H[i, list(r.permuted_eou_positions)])[:, : r.k_prime]
            pred = logits.argmax(dim=-1).numpy()
            hits += int((pred == np.asarray(r.order_labels)).sum())
            total += r.k_prime
    return hits / total if total else float("nan")


@torch.no_grad()
def mean_backbone_cosine(model: DialogueModel, vocab: Vocab, examples: Sequence[DialogueExample],
                         max_len: int = 128, max_utterances: int = 20, batch_size: int = 64) -> float:
    """Mean ``cos(h_s + h_v, h_o)`` over every triplet of the held-out contexts."""
    seqs = list(_sequences(examples, vocab, max_len, max_utterances))
    values = []
    model.eval()
    for lo in range(0, len(seqs), batch_size):
        batch = seqs[lo: lo + batch_size]
        H = model.hidden_states(batch)
        for i, seq in enumerate(batch):
            for s, v, o in seq.triplets:
                values.append(float(cosine_similarity(H[i, s] + H[i, v], H[i, o])))
    return float(np.mean(values)) if values else float("nan")
