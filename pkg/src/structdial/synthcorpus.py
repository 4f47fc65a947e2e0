"""Deterministic synthetic dialogue corpora.

Each dialogue draws one topic. A turn is built from an optional ordinal
marker (``first``, ``second``, ... by turn index), an optional grammar
sentence ``DET SUBJ VERB DET OBJ`` with its gold word indexes, and filler
words mixed from the topic pool and a shared pool. The positive response is
drawn from the same topic; negatives are other dialogues' responses.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .lexicon import DEFAULT_LEXICON, GrammarLexicon
from .text.corpus import Candidate, DialogueExample, Utterance, save_corpus

SENTENCE_WORDS = 5


@dataclass
class SynthConfig:
    dialogues: int = 1000
    turns_mean: float = 10.0
    turns_spread: float = 3.0        # std of the symmetric clipped turn-count distribution
    words_mean: float = 11.0
    words_spread: float = 3.0
    cue_strength: float = 1.0        # P(turn starts with its ordinal marker)
    svo_density: float = 0.5         # P(turn carries a grammar sentence)
    topic_rate: float = 0.6          # share of filler words drawn from the dialogue topic
    candidates: int = 2
    negative_pool: int = 0           # 0: sample negatives from every other dialogue
    seed: int = 0

    def validate(self, lexicon: GrammarLexicon = DEFAULT_LEXICON) -> None:
        for name in ("cue_strength", "svo_density", "topic_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.dialogues < 1 or self.candidates < 1:
            raise ConfigError("dialogues and candidates must be positive")
        if self.turns_mean < 1 or self.words_mean < 1:
            raise ConfigError("turn and word means must be >= 1")
        if self.candidates > 1 and self.dialogues < 2:
            raise ConfigError("negatives need at least two dialogues")
        if self.negative_pool and self.negative_pool < self.candidates - 1:
            raise ConfigError("negative pool smaller than the number of negatives per context")
        turns_hi = int(round(2 * self.turns_mean - 1))
        if turns_hi > len(lexicon.markers) and self.cue_strength > 0:
            raise ConfigError(
                f"lexicon has {len(lexicon.markers)} ordinal markers; turn counts up to {turns_hi} need more")
        if len(lexicon.topics) < 2:
            raise ConfigError("lexicon needs at least two topics")
        lexicon.check()


def _clipped_count(rng: np.random.Generator, mean: float, spread: float, lo: int) -> int:
    """Normal draw, rounded and clipped to ``[lo, 2*mean - lo]`` so the mean is preserved."""
    hi = int(round(2 * mean - lo))
    if hi <= lo or spread <= 0:
        return max(lo, int(round(mean)))
    return int(np.clip(round(rng.normal(mean, spread)), lo, hi))


class _Generator:
    def __init__(self, cfg: SynthConfig, lexicon: GrammarLexicon):
        self.cfg = cfg
        self.lex = lexicon
        self.det = sorted(lexicon.determiners)
        self.subj = sorted(lexicon.subjects)
        self.verb = sorted(lexicon.verbs)
        self.obj = sorted(lexicon.objects)
        self.fill = list(lexicon.fillers)

    def pick(self, rng, seq):
        return seq[int(rng.integers(len(seq)))]

    def sentence(self, rng) -> list[str]:
        return [self.pick(rng, self.det), self.pick(rng, self.subj), self.pick(rng, self.verb),
                self.pick(rng, self.det), self.pick(rng, self.obj)]

    def fillers(self, rng, topic: Sequence[str], n: int) -> list[str]:
        return [self.pick(rng, topic) if rng.random() < self.cfg.topic_rate else self.pick(rng, self.fill)
                for _ in range(n)]

    def turn(self, rng, index: int, topic) -> Utterance:
        cfg = self.cfg
        words: list[str] = []
        svo = []
        if rng.random() < cfg.cue_strength:
            words.append(self.lex.markers[index])
        with_svo = rng.random() < cfg.svo_density
        target = _clipped_count(rng, cfg.words_mean, cfg.words_spread, 1 + SENTENCE_WORDS)
        if with_svo:
            base = len(words)
            words += self.sentence(rng)
            svo = [(base + 1, base + 2, base + 4)]
        words += self.fillers(rng, topic, max(0, target - len(words)))
        return Utterance("A" if index % 2 == 0 else "B", words, svo)

    def response(self, rng, topic) -> list[str]:
        n = _clipped_count(rng, self.cfg.words_mean, self.cfg.words_spread, 1 + SENTENCE_WORDS)
        words = [self.pick(rng, topic)]  # guarantees a shared content word
        return words + self.fillers(rng, topic, n - 1)


def generate(cfg: SynthConfig, lexicon: GrammarLexicon = DEFAULT_LEXICON) -> list[DialogueExample]:
    cfg.validate(lexicon)
    gen = _Generator(cfg, lexicon)
    rng = np.random.default_rng([cfg.seed, 0])
    width = len(str(cfg.dialogues - 1))
    contexts, topics, responses = [], [], []
    for d in range(cfg.dialogues):
        topic = lexicon.topics[int(rng.integers(len(lexicon.topics)))]
        turns = _clipped_count(rng, cfg.turns_mean, cfg.turns_spread, 2 if cfg.turns_mean >= 2 else 1)
        contexts.append([gen.turn(rng, t, topic) for t in range(turns)])
        topics.append(topic)
        responses.append(gen.response(rng, topic))

    neg_rng = np.random.default_rng([cfg.seed, 1])
    n_neg = cfg.candidates - 1
    examples = []
    for d in range(cfg.dialogues):
        others = np.delete(np.arange(cfg.dialogues), d)
        if cfg.negative_pool:
            others = others[: cfg.negative_pool]
        negs = neg_rng.choice(others, size=n_neg, replace=False) if n_neg else []
        cands = [Candidate(list(responses[d]), 1)] + [Candidate(list(responses[j]), 0) for j in negs]
        order = neg_rng.permutation(len(cands))
        examples.append(DialogueExample(f"dlg{d:0{width}d}", contexts[d], [cands[i] for i in order]))
    return examples


def split(corpus: Sequence[DialogueExample], fractions: Sequence[float], seed: int = 0
          ) -> list[list[DialogueExample]]:
    """Seeded shuffle split by dialogue id; sizes are floored with the remainder going to the first part."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions must be positive and sum to 1, got {tuple(fractions)}")
    ids = sorted(ex.id for ex in corpus)
    by_id = {ex.id: ex for ex in corpus}
    order = np.random.default_rng(seed).permutation(len(ids))
    sizes = [int(math.floor(f * len(ids) + 1e-9)) for f in fractions]
    sizes[0] += len(ids) - sum(sizes)
    parts, start = [], 0
    for size in sizes:
        parts.append([by_id[ids[i]] for i in order[start: start + size]])
        start += size
    return parts


def corpus_stats(corpus: Sequence[DialogueExample]) -> dict:
    """Counts and means named after the usual dataset-statistics rows."""
    n_turns = [ex.turns for ex in corpus]
    utt_lens = [len(u.words) for ex in corpus for u in ex.context]
    cands = [len(ex.candidates) for ex in corpus]
    return {
        "dialogues": len(corpus),
        "context_response_pairs": int(sum(cands)),
        "candidates_per_context": float(np.mean(cands)) if cands else 0.0,
        "avg_turns_per_context": float(np.mean(n_turns)) if n_turns else 0.0,
        "avg_words_per_utterance": float(np.mean(utt_lens)) if utt_lens else 0.0,
        "utterances_with_svo": int(sum(bool(u.svo) for ex in corpus for u in ex.context)),
    }


def content_overlap_rates(corpus: Sequence[DialogueExample], lexicon: GrammarLexicon = DEFAULT_LEXICON
                          ) -> dict[str, float]:
    """Fraction of positive / negative candidates sharing a topic word with their context."""
    topic_words = {w for t in lexicon.topics for w in t}
    pos_hits, pos_n, neg_hits, neg_n = 0, 0, 0, 0
    for ex in corpus:
        ctx = {w for u in ex.context for w in u.words} & topic_words
        for c in ex.candidates:
            shared = bool(ctx & set(c.words))
            if c.label:
                pos_hits, pos_n = pos_hits + shared, pos_n + 1
            else:
                neg_hits, neg_n = neg_hits + shared, neg_n + 1
    return {"positive": pos_hits / pos_n if pos_n else 0.0,
            "negative": neg_hits / neg_n if neg_n else 0.0}


def write_corpus(corpus: Sequence[DialogueExample], path: str | Path, cfg: SynthConfig | None = None) -> Path:
    """Write the corpus and a ``<name>.stats.json`` sidecar next to it."""
    path = Path(path)
    save_corpus(corpus, path)
    stats = corpus_stats(corpus)
    stats["overlap"] = content_overlap_rates(corpus)
    if cfg is not None:
        stats["config"] = asdict(cfg)
    sidecar = path.with_name(path.stem + ".stats.json")
    sidecar.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar
