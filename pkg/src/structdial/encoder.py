"""Bidirectional transformer encoder (post-layer-norm, BERT layout)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import CapacityError, ContractViolation, InvalidArgumentError, VocabularyError
from .text.sequence import InputSequence
from .text.vocab import EOU_ID


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_position: int = 128
    dropout: float = 0.1
    seed: int = 0
    type_vocab: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise InvalidArgumentError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x, key_mask, p_drop=0.0, generator=None):
        b, n, d = x.shape
        dh = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        probs = torch.softmax(scores, dim=-1)
        ctx = dropout(probs, p_drop, generator) @ v
        ctx = ctx.transpose(1, 2).reshape(b, n, d)
        return self.out(ctx), probs


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg.hidden, cfg.heads)
        self.attn_norm = nn.LayerNorm(cfg.hidden, eps=1e-12)
        self.ffn_in = nn.Linear(cfg.hidden, cfg.ffn)
        self.ffn_out = nn.Linear(cfg.ffn, cfg.hidden)
        self.ffn_norm = nn.LayerNorm(cfg.hidden, eps=1e-12)
        self.p = cfg.dropout

    def forward(self, x, key_mask, train_mode=False, generator=None):
        p = self.p if train_mode else 0.0
        attn, probs = self.attention(x, key_mask, p, generator)
        x = self.attn_norm(x + dropout(attn, p, generator))
        h = self.ffn_out(gelu(self.ffn_in(x)))
        x = self.ffn_norm(x + dropout(h, p, generator))
        return x, probs


class Encoder(nn.Module):
    """Token + position + segment embeddings followed by the layer stack and a pooler."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.position_embedding = nn.Embedding(cfg.max_position, cfg.hidden)
        self.segment_embedding = nn.Embedding(cfg.type_vocab, cfg.hidden)
        self.embedding_norm = nn.LayerNorm(cfg.hidden, eps=1e-12)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.pooler = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, ids, attention_mask, segment_ids, train_mode=False, generator=None,
                return_attention=False):
        if ids.dim() != 2:
            raise InvalidArgumentError("ids must be (batch, n)")
        n = ids.shape[1]
        if n > self.cfg.max_position:
            raise CapacityError(f"sequence length {n} exceeds max position {self.cfg.max_position}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        p = self.cfg.dropout if train_mode else 0.0
        positions = torch.arange(n)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None] \
            + self.segment_embedding(segment_ids)
        x = dropout(self.embedding_norm(x), p, generator)
        key_mask = attention_mask.bool()
        attentions = []
        for layer in self.layers:
            x, probs = layer(x, key_mask, train_mode, generator)
            attentions.append(probs)
        return (x, attentions) if return_attention else x


def init_parameters(module: nn.Module, std: float, generator: torch.Generator) -> None:
    """Normal(0, std) for weights and embeddings, zero biases, unit layer-norm gains."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if ".weight" in name and ("norm" in name.split(".")[-2]):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)


def batch_tensors(seqs: Sequence[InputSequence]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
    mask = torch.from_numpy(np.stack([s.attention_mask for s in seqs]))
    seg = torch.from_numpy(np.stack([s.segment_ids for s in seqs]))
    return ids, mask, seg


def encode(seq: InputSequence, state: Encoder, train_mode: bool = False,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """Hidden states ``(n, d)`` for one sequence."""
    ids, mask, seg = batch_tensors([seq])
    return state(ids, mask, seg, train_mode, generator)[0]


def utterance_representations(H: torch.Tensor, eou_positions: Sequence[int],
                              token_ids) -> torch.Tensor:
    """Rows of ``H`` at the ``[EOU]`` positions, in the given order."""
    token_ids = np.asarray(token_ids)
    for pos in eou_positions:
        if not 0 <= pos < H.shape[0] or int(token_ids[pos]) != EOU_ID:
            raise ContractViolation(f"position {pos} does not hold an [EOU] token")
    return H[list(eou_positions)]


def pooled_representation(H: torch.Tensor, pooler: nn.Linear) -> torch.Tensor:
    """``tanh(W h_[CLS] + b)``; accepts ``(n, d)`` or ``(batch, n, d)``."""
    first = H[..., 0, :]
    return torch.tanh(pooler(first))
