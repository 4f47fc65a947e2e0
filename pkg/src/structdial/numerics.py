"""Differentiable primitives, the AdamW optimizer and finite-difference gradient checks.

Tensors and reverse-mode differentiation come from torch; the losses,
optimizer update and the gradient checker are implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericError, ShapeError

COSINE_EPS = 1e-8


def softmax_cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """Return ``-log softmax(logits)[target]``.

    ``logits`` may be a single vector (returns a scalar) or a matrix of rows
    with one target per row (returns a vector of per-row losses).
    """
    logits = torch.as_tensor(logits)
    if logits.dim() not in (1, 2):
        raise ShapeError(f"logits must be 1-D or 2-D, got shape {tuple(logits.shape)}")
    m = logits.shape[-1]
    if m < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {m}")
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.dim() == 1:
        if target.dim() != 0:
            raise ShapeError("a single logit vector takes a scalar target")
    elif target.shape != logits.shape[:1]:
        raise ShapeError(f"targets {tuple(target.shape)} do not match rows {logits.shape[0]}")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= m):
        raise IndexError(f"target out of range for {m} classes")
    log_z = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return log_z - picked


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """``a.b / max(|a||b|, eps)`` along the last dimension."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 0 or a.shape[-1] < 1:
        raise ShapeError("cosine_similarity needs vectors of length >= 1")
    dot = (a * b).sum(-1)
    norms = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    return dot / torch.clamp(norms, min=eps)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def hyperparameters(self) -> dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """Apply one AdamW update in place and return ``(params, state)``.

    Parameters whose gradient is ``None`` are skipped entirely, including the
    weight decay, so a frozen or unused head keeps its values. Weight decay is
    decoupled: it scales the weight directly and never enters the moments.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
            state.steps[name] = 0
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer moments for {name!r} do not match the parameter shape")
        state.steps[name] += 1
        t = state.steps[name]

        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params, state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr=3e-4,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in sorted(self.state.exp_avg):
            out[f"exp_avg/{name}"] = self.state.exp_avg[name]
            out[f"exp_avg_sq/{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], steps: Mapping[str, int]) -> None:
        self.state.exp_avg.clear()
        self.state.exp_avg_sq.clear()
        self.state.steps = {k: int(v) for k, v in steps.items()}
        for key, t in tensors.items():
            kind, name = key.split("/", 1)
            if name not in self.params:
                raise ShapeError(f"optimizer state for unknown parameter {name!r}")
            if tuple(t.shape) != tuple(self.params[name].shape):
                raise ShapeError(f"optimizer state shape mismatch for {name!r}")
            target = self.state.exp_avg if kind == "exp_avg" else self.state.exp_avg_sq
            target[name] = t.clone().to(self.params[name].dtype)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    coords: list[int]
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck]

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    stencil: int = 4,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``loss_fn`` is called without arguments and must read the (float64) leaf
    tensors in ``params``. With ``max_coords`` set, at most that many
    coordinates per tensor are sampled; the sampled flat indexes are recorded
    in the report. The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    ``stencil`` selects the 2-point central difference (error O(eps^2)) or
    the 4-point one (error O(eps^4)); the latter allows a larger ``eps`` and
    so less cancellation noise for the same truncation error.
    """
    if stencil not in (2, 4):
        raise InvalidArgumentError("stencil must be 2 or 4")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise InvalidArgumentError(f"grad_check needs float64 parameters; {name!r} is {p.dtype}")
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericError("grad_check: non-finite loss")
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    checks = []
    for name, p, g in zip(names, tensors, analytic):
        n = p.numel()
        if max_coords is not None and n > max_coords:
            coords = sorted(int(i) for i in rng.choice(n, size=max_coords, replace=False))
        else:
            coords = list(range(n))
        flat_grad = g.reshape(-1) if g is not None else torch.zeros(n, dtype=p.dtype)
        max_rel = max_abs = 0.0
        with torch.no_grad():
            flat = p.view(-1)
            for i in coords:
                orig = float(flat[i])
                shifted = {}
                for h in ((-2, -1, 1, 2) if stencil == 4 else (-1, 1)):
                    flat[i] = orig + h * eps
                    shifted[h] = float(loss_fn())
                flat[i] = orig
                if not all(math.isfinite(v) for v in shifted.values()):
                    raise NumericError(f"grad_check: non-finite loss while perturbing {name!r}[{i}]")
                if stencil == 4:
                    numeric = (8 * (shifted[1] - shifted[-1]) - (shifted[2] - shifted[-2])) / (12 * eps)
                else:
                    numeric = (shifted[1] - shifted[-1]) / (2 * eps)
                a = float(flat_grad[i])
                abs_err = abs(a - numeric)
                rel_err = abs_err / max(abs(a), abs(numeric), floor)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, rel_err)
        checks.append(ParamCheck(name, max_rel, max_abs, coords, max_rel <= tol))
    return GradCheckReport(tol=tol, params=checks)
