"""Run configuration and its file formats.

A config file is either JSON (an object) or flat ``key = value`` lines with
``#`` comments. Keys are the :class:`RunConfig` field names; values are
parsed by field type. ``eval_pairs`` is written ``10:1,10:2,10:5``.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ..encoder import EncoderConfig
from ..errors import ConfigError
from ..objectives import LossWeights

REGIMES = ("dap-posttrain", "dap-finetune", "mtf", "baseline-finetune")
TASKS = ("binary", "multichoice")
DEFAULT_EPOCHS = {"dap-posttrain": 3, "dap-finetune": 2, "mtf": 2, "baseline-finetune": 2}


@dataclass
class RunConfig:
    regime: str = "mtf"
    task: str = "binary"
    seed: int = 0

    train_corpus: str | None = None
    valid_corpus: str | None = None
    test_corpus: str | None = None
    init_checkpoint: str | None = None
    keep_pretrain_heads: bool = False

    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_position: int = 128
    dropout: float = 0.1
    init_std: float = 0.02

    max_len: int = 128
    max_utterances: int = 20
    min_count: int = 1

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    delta: float = 0.4
    mask_rate: float = 0.15

    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int | None = None
    max_steps: int | None = None
    checkpoint_every: int = 0
    eval_batch_size: int = 256
    eval_pairs: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if not self.init_std > 0.0:
            raise ConfigError("init_std must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        for name in ("hidden", "layers", "heads", "ffn", "batch_size", "max_utterances", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.max_len < 8 or self.max_position < self.max_len:
            raise ConfigError("need 8 <= max_len <= max_position")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        self.weights()  # validates the loss weights

    @property
    def num_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.regime] if self.epochs is None else self.epochs

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.beta1, self.beta2, self.beta3)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, hidden=self.hidden, layers=self.layers,
                             heads=self.heads, ffn=self.ffn, max_position=self.max_position,
                             dropout=self.dropout, seed=self.seed, init_std=self.init_std)

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update(changes)
        return RunConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def schema() -> dict[str, dict[str, Any]]:
    """Field name -> {type, default} for every config key."""
    out = {}
    for f in fields(RunConfig):
        default = f.default if f.default is not MISSING else None
        out[f.name] = {"type": str(f.type), "default": default}
    return out


def _parse_pairs(value) -> list[tuple[int, int]]:
    if isinstance(value, list):
        return [(int(n), int(k)) for n, k in value]
    pairs = []
    for part in str(value).split(","):
        part = part.strip()
        if part:
            n, k = part.split(":")
            pairs.append((int(n), int(k)))
    return pairs


def _coerce(name: str, type_str: str, value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", "")):
        if "None" in type_str:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if name == "eval_pairs":
            return _parse_pairs(value)
        if type_str.startswith("bool"):
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if type_str.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if type_str.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def config_from_mapping(data: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    known = {f.name: str(f.type) for f in fields(RunConfig)}
    current = asdict(base) if base is not None else {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current[key] = _coerce(key, known[key], value)
    return RunConfig(**current)


def parse_config_text(text: str) -> dict[str, Any]:
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    data = parse_config_text(Path(path).read_text(encoding="utf-8"))
    data.update(overrides or {})
    return config_from_mapping(data)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if key == "eval_pairs" and value is not None:
            value = ",".join(f"{n}:{k}" for n, k in value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
