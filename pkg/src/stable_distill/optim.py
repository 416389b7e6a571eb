"""Adam with global-norm gradient clipping, operating on named parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DivergenceError

MAX_SKIPPED_STEPS = 10


@dataclass
class TrainHyper:
    lr: float = 5e-4
    epochs: int = 1
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 5.0
    eval_every: int = 50

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def adam_update(params: dict[str, T.Tensor], state: AdamState,
                hyper: TrainHyper) -> float:
    """Apply one bias-corrected Adam step to every trainable param with a grad.

    Gradients are clipped by global norm first. Non-finite gradients skip the
    step; more than MAX_SKIPPED_STEPS consecutive skips abort. Returns the
    pre-clip global gradient norm. Gradients are consumed (reset to None).
    """
    grads = {k: p.grad for k, p in params.items()
             if p.requires_grad and p.grad is not None}
    if not grads:
        return 0.0
    norm = global_norm(grads)
    if not math.isfinite(norm):
        state.skipped += 1
        for p in params.values():
            p.grad = None
        if state.skipped > MAX_SKIPPED_STEPS:
            raise DivergenceError(
                f"{state.skipped} consecutive non-finite gradient steps")
        return norm
    state.skipped = 0

    scale = 1.0
    if hyper.clip_norm > 0.0 and norm > hyper.clip_norm:
        scale = hyper.clip_norm / norm
    state.step += 1
    bc1 = 1.0 - hyper.beta1 ** state.step
    bc2 = 1.0 - hyper.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        g = g * np.float32(scale) if scale != 1.0 else g
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        p.data = p.data - np.asarray(hyper.lr * update, dtype=p.data.dtype)
        p.grad = None
    return norm
