"""End-to-end gradient checks of every training loss through a tiny float64 encoder."""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from ..encoder import EncoderConfig
from ..model import DialogueModel, component_losses
from ..numerics import GradCheckReport, grad_check
from ..synthcorpus import SynthConfig, generate
from ..text.corruption import corrupt, make_nsp_pair
from ..text.sequence import assemble_sequence
from .train import corpus_vocab

LOSSES = ("mlm", "nsp", "uor", "sbr", "dm_binary", "dm_multichoice")
_HEADS = {"mlm": ("heads.mlm_bias",), "nsp": ("heads.nsp.",), "uor": ("heads.uor.",), "sbr": (),
          "dm_binary": ("heads.match.",), "dm_multichoice": ("heads.match.",)}

MAX_LEN = 48
EPS = 1e-3


@dataclass
class SuiteResult:
    loss: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _batch(loss: str, seed: int):
    """Two short dialogues, corrupted the way the trainer would for ``loss``."""
    synth = SynthConfig(dialogues=6, turns_mean=4, turns_spread=1, words_mean=6, words_spread=0,
                        svo_density=1.0, candidates=3 if loss == "dm_multichoice" else 2, seed=seed)
    corpus = generate(synth)
    vocab = corpus_vocab(corpus)
    records, labels, num_choices = [], None, None
    if loss in ("mlm", "nsp", "uor", "sbr"):
        for i in range(2):
            seq, nsp_label, _ = make_nsp_pair(corpus[i], corpus, vocab, [seed, i], MAX_LEN)
            records.append(corrupt(seq, len(vocab), [seed, i, 1], delta=1.0 if loss == "uor" else 0.0,
                                   mask_rate=0.3 if loss == "mlm" else 0.0, nsp_label=nsp_label))
    elif loss == "dm_binary":
        labels = []
        for i in range(2):
            for c, cand in enumerate(corpus[i].candidates):
                records.append(corrupt(assemble_sequence(corpus[i], c, vocab, MAX_LEN), len(vocab), [seed]))
                labels.append(cand.label)
    else:
        labels, num_choices = [], 3
        for i in range(2):
            for c in range(3):
                records.append(corrupt(assemble_sequence(corpus[i], c, vocab, MAX_LEN), len(vocab), [seed]))
            labels.append(corpus[i].positive_index)
    return vocab, records, labels, num_choices


def check_loss(loss: str, seed: int, coords: int = 2, tol: float = 1e-4) -> SuiteResult:
    vocab, records, labels, num_choices = _batch(loss, seed)
    cfg = EncoderConfig(vocab_size=len(vocab), hidden=16, layers=2, heads=2, ffn=32,
                        max_position=MAX_LEN, dropout=0.0, seed=seed, init_std=0.2)
    model = DialogueModel(cfg).double()
    component = "dm" if loss.startswith("dm") else loss
    heads = _HEADS[loss]
    params = {n: p for n, p in model.named_parameters()
              if n.startswith("encoder.") or any(n.startswith(h) for h in heads)}
    if component not in ("nsp", "dm"):
        # the pooler only feeds the NSP and matching heads
        params = {n: p for n, p in params.items() if not n.startswith("encoder.pooler.")}

    def loss_fn():
        H = model.hidden_states(records)
        values, _ = component_losses(model, records, H, {component}, labels, num_choices)
        return values[component]

    report = grad_check(loss_fn, params, eps=EPS, max_coords=coords, seed=seed, tol=tol)
    return SuiteResult(loss, seed, report)


def run_suite(seeds: int = 20, losses=LOSSES, coords: int = 2, tol: float = 1e-4,
              progress=None) -> list[SuiteResult]:
    results = []
    for loss in losses:
        for seed in range(seeds):
            t = time.perf_counter()
            res = check_loss(loss, seed, coords, tol)
            results.append(res)
            if progress is not None:
                progress(res, time.perf_counter() - t)
    return results
