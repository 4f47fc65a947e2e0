"""Response-selection ranking metrics: R_n@k, MAP, MRR, P@1, with bucketed breakdowns.

Candidates are ranked by descending score; ties go to the lower candidate
index. An instance counts as a hit for R_n@k when any positive is in the top
k. Instances with no positive are excluded from every metric and counted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError

log = logging.getLogger(__name__)

TURN_BUCKETS = ((0, 4), (4, 8), (8, 12), (12, 16), (16, 20))
LENGTH_BUCKETS = ((0, 5), (5, 10), (10, 15), (15, 20), (20, math.inf))


@dataclass
class RankingInstance:
    id: str
    scores: Sequence[float]
    labels: Sequence[int]
    turns: int | None = None
    utterance_length: float | None = None

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise InvalidArgumentError(f"{self.id}: {len(self.scores)} scores for {len(self.labels)} labels")
        if len(self.scores) < 2:
            raise InvalidArgumentError(f"{self.id}: need at least 2 candidates")
        if not all(math.isfinite(s) for s in self.scores):
            raise InvalidArgumentError(f"{self.id}: non-finite score")

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def has_positive(self) -> bool:
        return any(self.labels)

    def positive_ranks(self) -> list[int]:
        """1-based ranks of the positives, ascending."""
        order = sorted(range(self.n), key=lambda i: (-self.scores[i], i))
        return [r for r, i in enumerate(order, start=1) if self.labels[i]]


def recall_at_k(instance: RankingInstance, k: int) -> int:
    if not 1 <= k <= instance.n:
        raise InvalidArgumentError(f"k={k} outside 1..{instance.n}")
    ranks = instance.positive_ranks()
    return int(bool(ranks) and ranks[0] <= k)


def average_precision(instance: RankingInstance) -> float:
    ranks = instance.positive_ranks()
    return sum((j + 1) / r for j, r in enumerate(ranks)) / len(ranks)


def _scored(instances: Iterable[RankingInstance]) -> tuple[list[RankingInstance], int]:
    kept, excluded = [], 0
    for inst in instances:
        if inst.has_positive:
            kept.append(inst)
        else:
            excluded += 1
    if excluded:
        log.warning("excluded %d instance(s) without a positive candidate", excluded)
    return kept, excluded


def mean_recall_at_k(instances: Iterable[RankingInstance], k: int) -> float:
    kept, _ = _scored(instances)
    return float(np.mean([recall_at_k(i, k) for i in kept])) if kept else 0.0


def mean_average_precision(instances: Iterable[RankingInstance]) -> float:
    kept, _ = _scored(instances)
    return float(np.mean([average_precision(i) for i in kept])) if kept else 0.0


def mean_reciprocal_rank(instances: Iterable[RankingInstance]) -> float:
    kept, _ = _scored(instances)
    return float(np.mean([1.0 / i.positive_ranks()[0] for i in kept])) if kept else 0.0


def precision_at_1(instances: Iterable[RankingInstance]) -> float:
    kept, _ = _scored(instances)
    return float(np.mean([i.positive_ranks()[0] == 1 for i in kept])) if kept else 0.0


@dataclass
class MetricReport:
    recall: dict[str, float]
    map: float
    mrr: float
    p_at_1: float
    count: int
    excluded: int = 0
    buckets: dict[str, dict[str, "MetricReport"]] = field(default_factory=dict)
    bucket_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"recall": dict(self.recall), "map": self.map, "mrr": self.mrr,
               "p_at_1": self.p_at_1, "count": self.count, "excluded": self.excluded}
        if self.bucket_counts:
            out["bucket_counts"] = self.bucket_counts
            out["buckets"] = {kind: {name: rep.to_dict() for name, rep in reps.items()}
                              for kind, reps in self.buckets.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{k}\t{v:.6f}" for k, v in self.recall.items()]
        lines += [f"MAP\t{self.map:.6f}", f"MRR\t{self.mrr:.6f}", f"P@1\t{self.p_at_1:.6f}",
                  f"count\t{self.count}", f"excluded\t{self.excluded}"]
        for kind, reps in self.buckets.items():
            for name, rep in reps.items():
                r1 = next(iter(rep.recall.values()), float("nan"))
                lines.append(f"{kind}[{name}]\tcount={rep.count}\tR@1={r1:.6f}\tMRR={rep.mrr:.6f}")
        return "\n".join(lines) + "\n"

    def headline(self, metric: str = "R@1") -> float:
        if metric == "MRR":
            return self.mrr
        for key, v in self.recall.items():
            if key.endswith("@1"):
                return v
        return self.p_at_1


def default_pairs(instances: Sequence[RankingInstance]) -> list[tuple[int, int]]:
    ns = sorted({i.n for i in instances})
    return [(n, k) for n in ns for k in (1, 2, 5) if k <= n]


def _bucket_name(lo, hi) -> str:
    return f"{lo}-{hi}" if math.isfinite(hi) else f"{lo}+"


def _bucket_of(value: float, buckets) -> int:
    for j, (lo, hi) in enumerate(buckets):
        if lo <= value < hi:
            return j
    return len(buckets) - 1 if value >= buckets[-1][0] else 0


def compute_report(
    instances: Sequence[RankingInstance],
    pairs: Sequence[tuple[int, int]] | None = None,
    turn_buckets=TURN_BUCKETS,
    length_buckets=LENGTH_BUCKETS,
    with_buckets: bool = True,
) -> MetricReport:
    """All metrics globally, plus per-bucket sub-reports when bucket keys are known.

    ``R_n@k`` is computed over the instances with exactly ``n`` candidates.
    The last turn bucket is closed on the right (16-20 includes 20) and
    absorbs anything larger, so bucket counts always sum to the total.
    """
    instances = list(instances)
    if not instances:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    kept, excluded = _scored(instances)
    pairs = list(pairs) if pairs is not None else default_pairs(instances)
    recall = {}
    for n, k in pairs:
        group = [i for i in kept if i.n == n]
        if group:
            recall[f"R{n}@{k}"] = float(np.mean([recall_at_k(i, k) for i in group]))
    if kept:
        ap = float(np.mean([average_precision(i) for i in kept]))
        rr = float(np.mean([1.0 / i.positive_ranks()[0] for i in kept]))
        p1 = float(np.mean([i.positive_ranks()[0] == 1 for i in kept]))
    else:
        ap = rr = p1 = 0.0
    report = MetricReport(recall, ap, rr, p1, len(kept), excluded)
    if not with_buckets:
        return report
    for kind, attr, buckets in (("turns", "turns", turn_buckets),
                                ("utterance_length", "utterance_length", length_buckets)):
        if any(getattr(i, attr) is None for i in instances):
            continue
        groups: list[list[RankingInstance]] = [[] for _ in buckets]
        for inst in instances:
            groups[_bucket_of(getattr(inst, attr), buckets)].append(inst)
        report.bucket_counts[kind] = {}
        report.buckets[kind] = {}
        for (lo, hi), group in zip(buckets, groups):
            name = _bucket_name(lo, hi)
            report.bucket_counts[kind][name] = len(group)
            if group and any(i.has_positive for i in group):
                report.buckets[kind][name] = compute_report(group, pairs, with_buckets=False)
    return report


Scorer = Callable[[object], Sequence[float]]


def evaluate_model(scorer: Scorer, dataset: Sequence, pairs=None,
                   turn_buckets=TURN_BUCKETS, length_buckets=LENGTH_BUCKETS) -> MetricReport:
    """Score every candidate of every example and compute the full report.

    ``scorer(example)`` returns one score per candidate; ``dataset`` holds
    :class:`~structdial.text.corpus.DialogueExample` objects.
    """
    if not dataset:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    instances = []
    for ex in dataset:
        scores = [float(s) for s in scorer(ex)]
        instances.append(RankingInstance(ex.id, scores, ex.labels, ex.turns, ex.mean_utterance_length))
    return compute_report(instances, pairs, turn_buckets, length_buckets)


# ---------------------------------------------------------------------------
# prediction files


def load_predictions(path: str | Path) -> list[RankingInstance]:
    """Read ``{"id", "scores", "labels"}`` records (optional ``turns``, ``utterance_length``)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(RankingInstance(str(rec["id"]), [float(s) for s in rec["scores"]],
                                           [int(y) for y in rec["labels"]], rec.get("turns"),
                                           rec.get("utterance_length")))
            except (json.JSONDecodeError, KeyError, TypeError, InvalidArgumentError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return out


def save_predictions(instances: Iterable[RankingInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"id": inst.id, "scores": list(inst.scores), "labels": list(inst.labels)}
            if inst.turns is not None:
                rec["turns"] = inst.turns
            if inst.utterance_length is not None:
                rec["utterance_length"] = inst.utterance_length
            fh.write(json.dumps(rec) + "\n")
