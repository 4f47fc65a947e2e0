"""Dialogue records and the line-delimited JSON corpus format.

One record per line::

    {"id": "d1",
     "context": [{"speaker": "A", "text": "the cat chased the dog", "svo": [[1, 2, 4]]}],
     "candidates": [{"text": "fine", "label": 1}, {"text": "no", "label": 0}]}

``svo`` is optional. It may be one ``[s, v, o]`` triple or a list of them; an
empty list means the utterance was annotated and has no triplet. Unknown
fields are ignored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import DataError

log = logging.getLogger(__name__)

Triplet = tuple[int, int, int]


@dataclass
class Utterance:
    speaker: str
    words: list[str]
    svo: list[Triplet] | None = None

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class Candidate:
    words: list[str]
    label: int

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class DialogueExample:
    id: str
    context: list[Utterance]
    candidates: list[Candidate] = field(default_factory=list)

    def __post_init__(self):
        if not self.context:
            raise DataError(f"example {self.id!r} has an empty context")

    @property
    def positive_index(self) -> int | None:
        for i, c in enumerate(self.candidates):
            if c.label == 1:
                return i
        return None

    @property
    def labels(self) -> list[int]:
        return [c.label for c in self.candidates]

    @property
    def turns(self) -> int:
        return len(self.context)

    @property
    def mean_utterance_length(self) -> float:
        return sum(len(u.words) for u in self.context) / len(self.context)


def _parse_svo(raw, where: str) -> list[Triplet] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise DataError(f"{where}: svo must be a list")
    if len(raw) == 3 and all(isinstance(x, int) for x in raw):
        raw = [raw]
    out = []
    for t in raw:
        if not (isinstance(t, list) and len(t) == 3 and all(isinstance(x, int) for x in t)):
            raise DataError(f"{where}: malformed svo triple {t!r}")
        out.append((t[0], t[1], t[2]))
    return out


def example_from_record(rec: dict) -> DialogueExample:
    if not isinstance(rec, dict):
        raise DataError("record is not a JSON object")
    try:
        ex_id = str(rec["id"])
        context = []
        for i, u in enumerate(rec["context"]):
            words = str(u["text"]).lower().split()
            context.append(Utterance(str(u.get("speaker", "")), words,
                                     _parse_svo(u.get("svo"), f"{ex_id}/{i}")))
        candidates = []
        for c in rec.get("candidates", []):
            label = c["label"]
            if label not in (0, 1):
                raise DataError(f"{ex_id}: candidate label must be 0 or 1, got {label!r}")
            candidates.append(Candidate(str(c["text"]).lower().split(), int(label)))
    except (KeyError, TypeError) as exc:
        raise DataError(f"record missing or malformed field: {exc}") from exc
    return DialogueExample(ex_id, context, candidates)


def example_to_record(ex: DialogueExample) -> dict:
    ctx = []
    for u in ex.context:
        item = {"speaker": u.speaker, "text": u.text}
        if u.svo is not None:
            item["svo"] = [list(t) for t in u.svo]
        ctx.append(item)
    return {
        "id": ex.id,
        "context": ctx,
        "candidates": [{"text": c.text, "label": c.label} for c in ex.candidates],
    }


def parse_corpus_lines(lines: Iterable[str], permissive: bool = False
                       ) -> tuple[list[DialogueExample], list[tuple[int, str]]]:
    """Parse records; returns ``(examples, problems)``.

    ``problems`` lists ``(line_number, message)`` for skipped lines, which
    only happens with ``permissive``; otherwise the first bad line raises.
    """
    examples, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            examples.append(example_from_record(json.loads(line)))
        except (json.JSONDecodeError, DataError) as exc:
            msg = f"line {lineno}: {exc}"
            if not permissive:
                raise DataError(msg) from exc
            log.warning("skipping malformed record, %s", msg)
            problems.append((lineno, str(exc)))
    return examples, problems


def load_corpus(path: str | Path, permissive: bool = False) -> list[DialogueExample]:
    with open(path, encoding="utf-8") as fh:
        examples, _ = parse_corpus_lines(fh, permissive)
    return examples


def dump_lines(examples: Iterable[DialogueExample]) -> Iterator[str]:
    for ex in examples:
        yield json.dumps(example_to_record(ex), ensure_ascii=False, separators=(",", ":")) + "\n"


def save_corpus(examples: Iterable[DialogueExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(dump_lines(examples))
