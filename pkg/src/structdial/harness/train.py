"""Training regimes: two-stage post-training + fine-tuning, and multi-task fine-tuning.

Every batch is a pure function of ``(seed, epoch, unit indexes)`` and the
dropout generator of step ``s`` is seeded from ``(seed, s)``, so a run resumed
from a step-``s`` checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..checkpoint import Checkpoint, capture, load_checkpoint, load_params, restore_optimizer, save_checkpoint
from ..errors import ConfigError, NumericError, VersionError
from ..evaluation import MetricReport, RankingInstance, compute_report
from ..model import DialogueModel, component_losses
from ..numerics import AdamW
from ..objectives import LossWeights, dap_loss, mtf_loss
from ..text.corpus import DialogueExample, load_corpus
from ..text.corruption import CorruptionRecord, corrupt, make_nsp_pair
from ..text.sequence import assemble_sequence
from ..text.vocab import Vocab, build_vocab
from .config import RunConfig

log = logging.getLogger(__name__)

HEAD_PREFIXES = ("heads.nsp.", "heads.uor.", "heads.match.")


@dataclass
class Corpora:
    train: list[DialogueExample]
    valid: list[DialogueExample] | None = None
    test: list[DialogueExample] | None = None

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Corpora":
        if not cfg.train_corpus:
            raise FileNotFoundError("no training corpus configured (train_corpus)")
        return cls(
            train=load_corpus(cfg.train_corpus),
            valid=load_corpus(cfg.valid_corpus) if cfg.valid_corpus else None,
            test=load_corpus(cfg.test_corpus) if cfg.test_corpus else None,
        )


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def losses(self, keys=("mlm", "nsp", "uor", "sbr", "dm", "total")) -> list[dict]:
        """Step records without wall-clock fields, for replay comparisons."""
        return [{k: s[k] for k in ("step", "epoch", *keys, "counts")} for s in self.steps]


@dataclass
class RunResult:
    model: DialogueModel
    vocab: Vocab
    checkpoint: Checkpoint
    log: TrainLog
    report: MetricReport | None = None
    test_report: MetricReport | None = None
    best_epoch: int | None = None


def corpus_vocab(corpus: Sequence[DialogueExample], min_count: int = 1) -> Vocab:
    streams = [u.words for ex in corpus for u in ex.context]
    streams += [c.words for ex in corpus for c in ex.candidates]
    return build_vocab(streams, min_count)


def _step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, step, 7]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 11, epoch]).permutation(n)


# ---------------------------------------------------------------------------
# batch construction


def dap_batch(cfg: RunConfig, corpus: Sequence[DialogueExample], vocab: Vocab, epoch: int,
              indices: Sequence[int]) -> list[CorruptionRecord]:
    """NSP pairing, then permutation, masking and triplet indexing per example."""
    w = cfg.weights()
    delta = cfg.delta if w.lambda2 > 0 else 0.0
    mask_rate = cfg.mask_rate if w.lambda1 > 0 else 0.0
    records = []
    for i in indices:
        seed = [cfg.seed, epoch, int(i)]
        seq, label, _ = make_nsp_pair(corpus[i], corpus, vocab, seed + [1], cfg.max_len, cfg.max_utterances)
        records.append(corrupt(seq, len(vocab), seed + [2], delta, mask_rate, nsp_label=label))
    return records


def matching_units(cfg: RunConfig, corpus: Sequence[DialogueExample]) -> list[tuple[int, int]]:
    """Training units: ``(example, candidate)`` pairs for binary, ``(example, -1)`` for multiple choice."""
    if cfg.task == "multichoice":
        return [(i, -1) for i, ex in enumerate(corpus) if ex.positive_index is not None]
    return [(i, c) for i, ex in enumerate(corpus) for c in range(len(ex.candidates))]


def matching_batch(cfg: RunConfig, corpus: Sequence[DialogueExample], vocab: Vocab, epoch: int,
                   units: Sequence[tuple[int, int]], delta: float
                   ) -> tuple[list[CorruptionRecord], list[int], int | None]:
    """Records for the matching loss; all candidates of an example share one permutation."""
    records, labels = [], []
    num_choices = None
    for ex_idx, cand in units:
        ex = corpus[ex_idx]
        seed = [cfg.seed, epoch, int(ex_idx)]
        cands = range(len(ex.candidates)) if cand < 0 else [cand]
        for c in cands:
            seq = assemble_sequence(ex, c, vocab, cfg.max_len, cfg.max_utterances)
            records.append(corrupt(seq, len(vocab), seed + [2], delta, 0.0))
        if cand < 0:
            if num_choices is None:
                num_choices = len(ex.candidates)
            elif num_choices != len(ex.candidates):
                raise ValueError("multiple-choice examples must share one candidate count")
            labels.append(ex.positive_index)
        else:
            labels.append(ex.candidates[cand].label)
    return records, labels, num_choices


# ---------------------------------------------------------------------------
# scoring


class ModelScorer:
    """Scores every candidate of an example with the matching head (evaluation mode)."""

    def __init__(self, model: DialogueModel, vocab: Vocab, max_len: int, max_utterances: int,
                 batch_size: int = 256):
        self.model, self.vocab = model, vocab
        self.max_len, self.max_utterances, self.batch_size = max_len, max_utterances, batch_size

    def score_many(self, examples: Sequence[DialogueExample]) -> list[list[float]]:
        seqs, owners = [], []
        for e, ex in enumerate(examples):
            for c in range(len(ex.candidates)):
                seqs.append(assemble_sequence(ex, c, self.vocab, self.max_len, self.max_utterances))
                owners.append(e)
        out: list[list[float]] = [[] for _ in examples]
        self.model.eval()
        for lo in range(0, len(seqs), self.batch_size):
            scores = self.model.score(seqs[lo: lo + self.batch_size])
            for j, s in enumerate(scores):
                out[owners[lo + j]].append(float(s))
        return out

    def __call__(self, example: DialogueExample) -> list[float]:
        return self.score_many([example])[0]


def evaluate_examples(model: DialogueModel, vocab: Vocab, examples: Sequence[DialogueExample],
                      cfg: RunConfig) -> MetricReport:
    scorer = ModelScorer(model, vocab, cfg.max_len, cfg.max_utterances, cfg.eval_batch_size)
    scores = scorer.score_many(examples)
    instances = [RankingInstance(ex.id, s, ex.labels, ex.turns, ex.mean_utterance_length)
                 for ex, s in zip(examples, scores)]
    return compute_report(instances, cfg.eval_pairs)


# ---------------------------------------------------------------------------
# the loop


class _RunWriter:
    def __init__(self, run_dir: Path | None):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def append(self, name: str, record: dict) -> None:
        if self.run_dir is not None:
            with open(self.run_dir / name, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(self, name: str, ckpt: Checkpoint) -> None:
        if self.run_dir is not None:
            save_checkpoint(ckpt, self.run_dir / name)

    def text(self, name: str, content: str) -> None:
        if self.run_dir is not None:
            (self.run_dir / name).write_text(content, encoding="utf-8")


def _train(
    cfg: RunConfig,
    model: DialogueModel,
    vocab: Vocab,
    optimizer: AdamW,
    n_units: int,
    make_batch: Callable[[int, np.ndarray], tuple[list[CorruptionRecord], list | None, int | None]],
    which: set[str],
    composite: Callable,
    weights: LossWeights,
    writer: _RunWriter,
    start_step: int = 0,
    on_epoch_end: Callable[[int, int], None] | None = None,
    regime_tag: str = "",
) -> TrainLog:
    tlog = TrainLog()
    if n_units == 0:
        return tlog
    bsz = cfg.batch_size
    per_epoch = math.ceil(n_units / bsz)
    total = per_epoch * cfg.num_epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    order_cache: dict[int, np.ndarray] = {}
    t0 = time.perf_counter()
    for step in range(start_step + 1, total + 1):
        g = step - 1
        epoch, j = divmod(g, per_epoch)
        if epoch not in order_cache:
            order_cache.clear()
            order_cache[epoch] = _epoch_order(cfg.seed, epoch, n_units)
        units = order_cache[epoch][j * bsz:(j + 1) * bsz]
        records, labels, num_choices = make_batch(epoch, units)

        model.train()
        H = model.hidden_states(records, train_mode=True, generator=_step_generator(cfg.seed, step))
        comps, counts = component_losses(model, records, H, which, labels, num_choices)
        loss = composite(comps, weights).total
        logged = composite({k: float(v.detach()) for k, v in comps.items()}, weights, counts)
        if not math.isfinite(float(loss.detach())):
            writer.checkpoint("last_good.ckpt", capture(model, vocab, optimizer,
                                                        {"step": step - 1, "regime": regime_tag}))
            raise NumericError(f"non-finite loss at step {step}: {logged.as_log()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        rec = {"step": step, "epoch": epoch, **logged.as_log(), "wall_time": time.perf_counter() - t0}
        tlog.steps.append(rec)
        writer.append("train_log.jsonl", rec)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            writer.checkpoint(f"step{step:06d}.ckpt",
                              capture(model, vocab, optimizer, {"step": step, "regime": regime_tag}))
        if on_epoch_end is not None and (j == per_epoch - 1 or step == total):
            on_epoch_end(epoch, step)
    return tlog


def _components(weights: LossWeights, regime: str, delta: float) -> set[str]:
    if regime == "dap":
        which = set()
        if weights.lambda1 > 0:
            which |= {"mlm", "nsp"}
        if weights.lambda2 > 0:
            which.add("uor")
        if weights.lambda3 > 0:
            which.add("sbr")
        return which
    which = {"dm"}
    if weights.beta2 > 0 and delta > 0:
        which.add("uor")
    if weights.beta3 > 0:
        which.add("sbr")
    return which


def _require(cfg: RunConfig, *regimes: str) -> None:
    if cfg.regime not in regimes:
        raise ConfigError(f"regime {cfg.regime!r} not valid here; expected one of {regimes}")


def _new_optimizer(cfg: RunConfig, model: DialogueModel) -> AdamW:
    return AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _meta(cfg: RunConfig, step: int, regime: str) -> dict:
    return {"step": step, "regime": regime, "seed": cfg.seed, "threads": torch.get_num_threads()}


# ---------------------------------------------------------------------------
# regimes


def _as_checkpoint(source: str | Path | Checkpoint | None) -> Checkpoint | None:
    if source is None or isinstance(source, Checkpoint):
        return source
    return load_checkpoint(source)


def run_dap_posttrain(cfg: RunConfig, corpora: Corpora | None = None, run_dir: Path | None = None,
                      resume: str | Path | Checkpoint | None = None,
                      init: str | Path | Checkpoint | None = None) -> RunResult:
    """Post-train the encoder on ``lambda1 (mlm + nsp) + lambda2 uor + lambda3 sbr``.

    ``resume`` continues a run (weights, optimizer state and step counter);
    ``init`` (or ``cfg.init_checkpoint``) only copies weights and vocabulary,
    for post-training an already pre-trained encoder.
    """
    _require(cfg, "dap-posttrain")
    corpora = corpora or Corpora.from_config(cfg)
    corpus = corpora.train
    writer = _RunWriter(run_dir)
    start = 0
    init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
    if resume is not None:
        ckpt = _as_checkpoint(resume)
        vocab = ckpt.vocab
        model = ckpt.build_model()
        optimizer = _new_optimizer(cfg, model)
        restore_optimizer(optimizer, ckpt)
        start = int(ckpt.meta.get("step", 0))
    elif init is not None:
        model, vocab = _init_from_checkpoint(cfg, init, keep_heads=True)
        optimizer = _new_optimizer(cfg, model)
    else:
        vocab = corpus_vocab(corpus, cfg.min_count)
        model = DialogueModel(cfg.encoder_config(len(vocab)))
        optimizer = _new_optimizer(cfg, model)
    weights = cfg.weights()
    tlog = _train(
        cfg, model, vocab, optimizer, len(corpus),
        lambda epoch, idx: (dap_batch(cfg, corpus, vocab, epoch, idx), None, None),
        _components(weights, "dap", cfg.delta), dap_loss, weights, writer, start,
        regime_tag="dap-posttrain",
    )
    final_step = tlog.steps[-1]["step"] if tlog.steps else start
    ckpt = capture(model, vocab, optimizer, _meta(cfg, final_step, "dap-posttrain"))
    writer.checkpoint("checkpoint.ckpt", ckpt)
    return RunResult(model, vocab, ckpt, tlog)


def _init_from_checkpoint(cfg: RunConfig, init: Checkpoint, keep_heads: bool | None = None
                          ) -> tuple[DialogueModel, Vocab]:
    expected = cfg.encoder_config(len(init.vocab))
    got = init.config
    for name in ("hidden", "layers", "heads", "ffn", "max_position"):
        if getattr(expected, name) != getattr(got, name):
            raise VersionError(f"checkpoint {name}={getattr(got, name)} incompatible with run "
                               f"config {name}={getattr(expected, name)}")
    model = DialogueModel(expected)
    keep = cfg.keep_pretrain_heads if keep_heads is None else keep_heads
    skip = () if keep else HEAD_PREFIXES
    load_params(model, init.params, strict=True, skip_prefixes=skip)
    return model, init.vocab


def _matching_run(cfg: RunConfig, corpora: Corpora, run_dir, init: Checkpoint | None,
                  delta: float, regime: str, which: set[str]) -> RunResult:
    writer = _RunWriter(run_dir)
    train = corpora.train
    valid = corpora.valid if corpora.valid is not None else train
    if init is not None:
        model, vocab = _init_from_checkpoint(cfg, init)
    else:
        vocab = corpus_vocab(train, cfg.min_count)
        model = DialogueModel(cfg.encoder_config(len(vocab)))
    optimizer = _new_optimizer(cfg, model)
    weights = cfg.weights()
    units = matching_units(cfg, train)
    headline = "MRR" if cfg.task == "multichoice" else "R@1"

    best = {"value": -1.0, "epoch": None, "report": None, "state": None}
    tlog_epochs: list[dict] = []

    def on_epoch_end(epoch: int, step: int) -> None:
        report = evaluate_examples(model, vocab, valid, cfg)
        value = report.headline(headline)
        entry = {"epoch": epoch, "step": step, "metric": headline, "value": value,
                 "valid": report.to_dict()}
        tlog_epochs.append(entry)
        writer.append("epoch_log.jsonl", entry)
        if value > best["value"]:
            best.update(value=value, epoch=epoch, report=report,
                        state=copy.deepcopy(model.state_dict()))

    def make_batch(epoch, idx):
        return matching_batch(cfg, train, vocab, epoch, [units[i] for i in idx], delta)

    tlog = _train(cfg, model, vocab, optimizer, len(units), make_batch, which, mtf_loss, weights,
                  writer, on_epoch_end=on_epoch_end, regime_tag=regime)
    tlog.epochs = tlog_epochs
    if best["state"] is not None:
        model.load_state_dict(best["state"])
        report = best["report"]
    else:
        report = evaluate_examples(model, vocab, valid, cfg)
    final_step = tlog.steps[-1]["step"] if tlog.steps else 0
    ckpt = capture(model, vocab, optimizer if tlog.steps else None, _meta(cfg, final_step, regime))
    if init is not None and not tlog.steps:
        ckpt = init
    writer.checkpoint("checkpoint.ckpt", ckpt)
    writer.text("report.json", report.to_json())
    writer.text("report.txt", report.to_text())
    test_report = None
    if corpora.test is not None:
        test_report = evaluate_examples(model, vocab, corpora.test, cfg)
        writer.text("test_report.json", test_report.to_json())
        writer.text("test_report.txt", test_report.to_text())
    return RunResult(model, vocab, ckpt, tlog, report, test_report, best["epoch"])


def run_finetune(cfg: RunConfig, corpora: Corpora | None = None, run_dir: Path | None = None,
                 init: str | Path | Checkpoint | None = None) -> RunResult:
    """Optimize the matching loss only; best epoch chosen on validation."""
    _require(cfg, "dap-finetune", "baseline-finetune")
    corpora = corpora or Corpora.from_config(cfg)
    init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
    return _matching_run(cfg, corpora, run_dir, init, 0.0, cfg.regime, {"dm"})


def run_mtf(cfg: RunConfig, corpora: Corpora | None = None, run_dir: Path | None = None,
            init: str | Path | Checkpoint | None = None) -> RunResult:
    """Single stage ``beta1 dm + beta2 uor + beta3 sbr`` on permuted contexts.

    Starts from random weights, or from a pre-trained encoder given by
    ``init`` / ``cfg.init_checkpoint``.
    """
    _require(cfg, "mtf")
    corpora = corpora or Corpora.from_config(cfg)
    init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
    weights = cfg.weights()
    delta = cfg.delta if weights.beta2 > 0 else 0.0
    return _matching_run(cfg, corpora, run_dir, init, delta, "mtf", _components(weights, "mtf", delta))


def run_regime(cfg: RunConfig, corpora: Corpora | None = None, run_dir: Path | None = None) -> RunResult:
    """Dispatch on ``cfg.regime``; ``dap-finetune`` without an init checkpoint runs both stages."""
    corpora = corpora or Corpora.from_config(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    if cfg.regime == "dap-posttrain":
        return run_dap_posttrain(cfg, corpora, run_dir)
    if cfg.regime == "mtf":
        return run_mtf(cfg, corpora, run_dir)
    if cfg.regime == "dap-finetune" and not cfg.init_checkpoint:
        stage1 = run_dap_posttrain(cfg.replace(regime="dap-posttrain"), corpora,
                                   run_dir / "posttrain" if run_dir else None)
        return run_finetune(cfg, corpora, run_dir / "finetune" if run_dir else None, init=stage1.checkpoint)
    return run_finetune(cfg, corpora, run_dir)


DEFAULT_SWEEP = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class SweepRow:
    delta: float
    metric: str
    value: float
    report: MetricReport


def sweep_delta(cfg: RunConfig, deltas: Sequence[float] = DEFAULT_SWEEP, corpora: Corpora | None = None,
                run_dir: Path | None = None) -> list[SweepRow]:
    """Run ``cfg.regime`` once per delta and record the validation headline metric.

    The ``delta = 0`` row is the no-permutation baseline for the same regime.
    """
    corpora = corpora or Corpora.from_config(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    metric = "MRR" if cfg.task == "multichoice" else "R@1"
    rows = []
    for delta in deltas:
        sub = run_dir / f"delta_{delta:.2f}" if run_dir else None
        result = run_regime(cfg.replace(delta=float(delta)), corpora, sub)
        if result.report is None:
            raise ValueError("the sweep needs a regime that fine-tunes (not dap-posttrain)")
        rows.append(SweepRow(float(delta), metric, result.report.headline(metric), result.report))
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"delta\t{metric}"] + [f"{r.delta:.2f}\t{r.value:.6f}" for r in rows]
        (run_dir / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        payload = [{"delta": r.delta, "metric": r.metric, "value": r.value, "report": r.report.to_dict()}
                   for r in rows]
        (run_dir / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return rows
