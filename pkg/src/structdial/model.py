"""Encoder plus objective heads, and batched loss components over corrupted records."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import Encoder, EncoderConfig, batch_tensors, init_parameters, pooled_representation
from .objectives import (
    MAX_ORDER_SLOTS,
    ObjectiveHeads,
    dm_loss_binary,
    dm_loss_multichoice,
    mlm_loss,
    nsp_loss,
    sbr_loss,
    uor_loss,
)
from .text.corruption import CorruptionRecord


class DialogueModel(nn.Module):
    def __init__(self, cfg: EncoderConfig, max_slots: int = MAX_ORDER_SLOTS):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.heads = ObjectiveHeads(cfg.vocab_size, cfg.hidden, max_slots)
        gen = torch.Generator().manual_seed(cfg.seed)
        init_parameters(self, cfg.init_std, gen)

    def hidden_states(self, records: Sequence[CorruptionRecord], train_mode=False, generator=None):
        ids, mask, seg = batch_tensors([getattr(r, "seq", r) for r in records])
        return self.encoder(ids, mask, seg, train_mode, generator)

    def pooled(self, H: torch.Tensor) -> torch.Tensor:
        return pooled_representation(H, self.encoder.pooler)

    def match_logits(self, H: torch.Tensor) -> torch.Tensor:
        return self.heads.match(self.pooled(H)).squeeze(-1)

    @torch.no_grad()
    def score(self, records: Sequence) -> np.ndarray:
        """Matching logits in evaluation mode (higher = better response).

        Accepts corruption records or bare input sequences.
        """
        H = self.hidden_states(records, train_mode=False)
        return self.match_logits(H).double().numpy()


def component_losses(
    model: DialogueModel,
    records: Sequence[CorruptionRecord],
    H: torch.Tensor,
    which: Iterable[str],
    match_labels: Sequence[int] | None = None,
    num_choices: int | None = None,
) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    """Batch values for the requested components.

    Per-example sums (UOR, SBR, DM) are divided by the number of examples so
    every component sits on a per-example scale. For multiple choice,
    ``records`` holds ``num_choices`` consecutive sequences per example.
    """
    which = set(which)
    out: dict[str, torch.Tensor] = {}
    counts: dict[str, int] = {}
    b = len(records)
    if "mlm" in which:
        labels = torch.from_numpy(np.stack([r.mlm_labels for r in records]))
        out["mlm"], counts["mlm"] = mlm_loss(H, labels, model.encoder.token_embedding.weight,
                                             model.heads.mlm_bias)
    if "nsp" in which:
        labels = [r.nsp_label for r in records]
        out["nsp"] = nsp_loss(model.pooled(H), labels, model.heads.nsp)
        counts["nsp"] = b
    if "uor" in which:
        total, n = H.sum() * 0.0, 0
        for i, r in enumerate(records):
            if len(r.order_labels) < 2:
                continue
            reps = H[i, list(r.permuted_eou_positions)]
            loss, k = uor_loss(reps, r.order_labels, model.heads.uor)
            total, n = total + loss, n + k
        out["uor"], counts["uor"] = total / b, n
    if "sbr" in which:
        total, n = H.sum() * 0.0, 0
        for i, r in enumerate(records):
            loss, m = sbr_loss(H[i], r.seq.triplets, r.seq.length)
            total, n = total + loss, n + m
        out["sbr"], counts["sbr"] = total / b, n
    if "dm" in which:
        logits = model.match_logits(H)
        if num_choices is None:
            out["dm"] = dm_loss_binary(torch.sigmoid(logits), match_labels) / b
            counts["dm"] = b
        else:
            scores = logits.view(-1, num_choices)
            correct = torch.as_tensor(match_labels, dtype=torch.long)
            out["dm"] = dm_loss_multichoice(scores, correct, num_choices) / scores.shape[0]
            counts["dm"] = scores.shape[0]
    return out, counts
