"""Versioned checkpoint container.

Layout: a magic line, one line of canonical JSON (config, vocabulary, meta,
tensor index), then the tensors as little-endian row-major float32 blobs in
index order. Writing is a pure function of the contents, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig
from .errors import DataError, VersionError
from .model import DialogueModel
from .numerics import AdamW
from .text.vocab import Vocab

MAGIC = b"STRUCTDIAL-CKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: EncoderConfig
    vocab: Vocab
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: dict[str, int] = field(default_factory=dict)
    optimizer_hparams: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def build_model(self) -> DialogueModel:
        model = DialogueModel(self.config)
        load_params(model, self.params)
        return model


def _as_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(t, dtype="<f4")


def capture(model: DialogueModel, vocab: Vocab, optimizer: AdamW | None = None,
            meta: dict | None = None) -> Checkpoint:
    params = {k: _as_f32(v) for k, v in model.state_dict().items()}
    ckpt = Checkpoint(config=model.cfg, vocab=vocab, params=params, meta=dict(meta or {}))
    if optimizer is not None:
        ckpt.optimizer = {k: _as_f32(v) for k, v in optimizer.state_tensors().items()}
        ckpt.optimizer_steps = dict(sorted(optimizer.state.steps.items()))
        ckpt.optimizer_hparams = optimizer.state.hyperparameters()
    return ckpt


def load_params(model: DialogueModel, params: dict[str, np.ndarray], strict: bool = True,
                skip_prefixes: tuple[str, ...] = ()) -> list[str]:
    """Copy arrays into ``model``; returns the names that were loaded."""
    own = model.state_dict()
    loaded = []
    for name, arr in params.items():
        if any(name.startswith(p) for p in skip_prefixes):
            continue
        if name not in own:
            if strict:
                raise VersionError(f"checkpoint parameter {name!r} not in model")
            continue
        if tuple(own[name].shape) != tuple(arr.shape):
            raise VersionError(f"shape mismatch for {name!r}: model {tuple(own[name].shape)}, "
                               f"checkpoint {tuple(arr.shape)}")
        with torch.no_grad():
            own[name].copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))
        loaded.append(name)
    missing = set(own) - set(params)
    if strict and missing and not skip_prefixes:
        raise VersionError(f"checkpoint lacks parameters: {sorted(missing)}")
    return loaded


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for group, tensors in (("model", ckpt.params), ("optim", ckpt.optimizer)):
        for name in sorted(tensors):
            arr = _as_f32(tensors[name])
            raw = arr.tobytes(order="C")
            index.append({"group": group, "name": name, "shape": list(arr.shape),
                          "dtype": "float32", "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "meta": ckpt.meta,
        "optimizer": {"steps": ckpt.optimizer_steps, "hyperparameters": ckpt.optimizer_hparams},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()
    return MAGIC + head + b"\n" + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise DataError("not a checkpoint file (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end])
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {header.get('format_version')}")
    body = memoryview(data)[end + 1:]
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "optim": {}}
    for entry in header["tensors"]:
        raw = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        groups[entry["group"]][entry["name"]] = arr
    opt = header.get("optimizer", {})
    return Checkpoint(
        config=EncoderConfig(**header["encoder_config"]),
        vocab=Vocab(header["vocab"]),
        params=groups["model"],
        optimizer=groups["optim"],
        optimizer_steps={k: int(v) for k, v in opt.get("steps", {}).items()},
        optimizer_hparams=dict(opt.get("hyperparameters", {})),
        meta=header.get("meta", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint) -> None:
    tensors = {k: torch.from_numpy(v.copy()) for k, v in ckpt.optimizer.items()}
    optimizer.load_state_tensors(tensors, ckpt.optimizer_steps)
