"""Training losses and their weighted composites.

Per-example forms follow the objectives directly: UOR sums cross-entropy over
the permuted slots, SBR sums ``1 - cos(h_s + h_v, h_o)`` over triplets, MLM
averages over masked positions. Batch scaling happens in
:func:`structdial.model.component_losses`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import torch
from torch import nn

from .errors import ConfigError, ContractViolation, InvalidArgumentError, VocabularyError
from .numerics import cosine_similarity, softmax_cross_entropy

MAX_ORDER_SLOTS = 20
PROB_CLAMP = 1e-7


class ObjectiveHeads(nn.Module):
    """Output layers: tied MLM decoder bias, NSP, UOR slot classifier, matching score."""

    def __init__(self, vocab_size: int, hidden: int, max_slots: int = MAX_ORDER_SLOTS):
        super().__init__()
        self.mlm_bias = nn.Parameter(torch.zeros(vocab_size))
        self.nsp = nn.Linear(hidden, 2)
        self.uor = nn.Linear(hidden, max_slots)
        self.match = nn.Linear(hidden, 1)


# ---------------------------------------------------------------------------
# component losses


def mlm_loss(H: torch.Tensor, labels: torch.Tensor, token_embedding: torch.Tensor,
             bias: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy over positions with a nonzero label.

    ``H`` is ``(..., n, d)`` and ``labels`` the matching ``(..., n)`` ids (0 =
    ignore). The decoder is tied to ``token_embedding``.
    """
    labels = torch.as_tensor(labels)
    sel = labels != 0
    count = int(sel.sum())
    if count == 0:
        return H.sum() * 0.0, 0
    vocab = token_embedding.shape[0]
    if int(labels.max()) >= vocab or int(labels.min()) < 0:
        raise VocabularyError(f"MLM label outside vocabulary of size {vocab}")
    logits = H[sel] @ token_embedding.T
    if bias is not None:
        logits = logits + bias
    return softmax_cross_entropy(logits, labels[sel]).mean(), count


def nsp_loss(pooled: torch.Tensor, label, head: nn.Linear) -> torch.Tensor:
    """Two-way cross-entropy; mean over the batch if ``pooled`` is ``(B, d)``."""
    logits = head(pooled)
    label = torch.as_tensor(label, dtype=torch.long)
    if pooled.dim() == 1:
        return softmax_cross_entropy(logits, label)
    return softmax_cross_entropy(logits, label).mean()


def uor_loss(reps: torch.Tensor, order_labels: Sequence[int], head: nn.Linear
             ) -> tuple[torch.Tensor, int]:
    """Sum over permuted slots of cross-entropy against the slot's original index.

    ``reps`` holds the ``K'`` permuted-slot representations in surface order.
    Logits are restricted to the first ``K'`` position classes. ``K' < 2`` is
    the skip signal and returns ``(0, 0)``.
    """
    k = len(order_labels)
    if k < 2:
        return reps.sum() * 0.0, 0
    if sorted(order_labels) != list(range(k)):
        raise ContractViolation(f"order labels {tuple(order_labels)} are not a permutation of 0..{k - 1}")
    if reps.shape[0] != k:
        raise ContractViolation(f"{reps.shape[0]} slot representations for {k} labels")
    if k > head.out_features:
        raise ContractViolation(f"{k} permuted slots exceed the head's {head.out_features} classes")
    logits = head(reps)[:, :k]
    return softmax_cross_entropy(logits, torch.as_tensor(order_labels)).sum(), k


def sbr_loss(H: torch.Tensor, triplets: Sequence[tuple[int, int, int]],
             length: int | None = None) -> tuple[torch.Tensor, int]:
    """``sum_k 1 - cos(h_subj + h_verb, h_obj)`` over first-subtoken positions."""
    m = len(triplets)
    if m == 0:
        return H.sum() * 0.0, 0
    limit = H.shape[0] if length is None else length
    idx = torch.as_tensor(triplets, dtype=torch.long)
    if int(idx.max()) >= limit or int(idx.min()) < 0:
        raise ContractViolation(f"triplet index outside the non-padding range [0, {limit})")
    hs, hv, ho = H[idx[:, 0]], H[idx[:, 1]], H[idx[:, 2]]
    return (1.0 - cosine_similarity(hs + hv, ho)).sum(), m


def dm_loss_binary(g: torch.Tensor, labels) -> torch.Tensor:
    """Binary cross-entropy summed over examples; ``g`` holds match probabilities."""
    g = torch.as_tensor(g).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = torch.as_tensor(labels, dtype=g.dtype)
    return -(y * torch.log(g) + (1.0 - y) * torch.log(1.0 - g)).sum()


def dm_loss_multichoice(scores: torch.Tensor, correct, num_choices: int | None = None) -> torch.Tensor:
    """Softmax over each row of ``C`` candidate scores; cross-entropy summed over rows."""
    scores = torch.as_tensor(scores)
    c = scores.shape[-1]
    if num_choices is not None and num_choices != c:
        raise InvalidArgumentError(f"expected {num_choices} choices, got {c}")
    if c < 2:
        raise InvalidArgumentError("multiple choice needs at least 2 candidates")
    return softmax_cross_entropy(scores, correct).sum()


# ---------------------------------------------------------------------------
# composites


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v!r}")


COMPONENTS = ("mlm", "nsp", "uor", "sbr", "dm")


@dataclass
class LossBreakdown:
    mlm: object = 0.0
    nsp: object = 0.0
    uor: object = 0.0
    sbr: object = 0.0
    dm: object = 0.0
    total: object = 0.0
    counts: dict[str, int] = field(default_factory=dict)

    def as_log(self) -> dict:
        out = {k: float(getattr(self, k)) for k in COMPONENTS}
        out["total"] = float(self.total)
        out["counts"] = dict(self.counts)
        return out


def _get(components: Mapping[str, object], key: str):
    return components.get(key, 0.0)


def dap_loss(components: Mapping[str, object], weights: LossWeights,
             counts: Mapping[str, int] | None = None) -> LossBreakdown:
    """``lambda1 (mlm + nsp) + lambda2 uor + lambda3 sbr``; works on floats or tensors."""
    mlm, nsp, uor, sbr = (_get(components, k) for k in ("mlm", "nsp", "uor", "sbr"))
    total = weights.lambda1 * (mlm + nsp) + weights.lambda2 * uor + weights.lambda3 * sbr
    return LossBreakdown(mlm=mlm, nsp=nsp, uor=uor, sbr=sbr, dm=0.0, total=total,
                         counts=dict(counts or {}))


def mtf_loss(components: Mapping[str, object], weights: LossWeights,
             counts: Mapping[str, int] | None = None) -> LossBreakdown:
    """``beta1 dm + beta2 uor + beta3 sbr``; works on floats or tensors."""
    dm, uor, sbr = (_get(components, k) for k in ("dm", "uor", "sbr"))
    total = weights.beta1 * dm + weights.beta2 * uor + weights.beta3 * sbr
    return LossBreakdown(dm=dm, uor=uor, sbr=sbr, total=total, counts=dict(counts or {}))


def rederive_total(log: Mapping[str, float], regime: str, weights: LossWeights) -> float:
    """Recompute a logged total from its logged components."""
    fn = dap_loss if regime == "dap" else mtf_loss
    return float(fn({k: log[k] for k in COMPONENTS}, weights).total)
