"""Adam with plateau learning-rate decay and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor

CONTINUE = "continue"
REDUCE_LR = "reduce_lr"
STOP = "stop"


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}" + (" ..." if len(missing) > 5 else ""))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    step = state.alpha * math.sqrt(c2) / c1
    eps_hat = state.eps * math.sqrt(c2)
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # alpha * m_hat / (sqrt(v_hat) + eps), rearranged to avoid two extra passes
        p.data -= (step * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)


@dataclass
class StopMonitor:
    """Tracks validation progress and decides on LR decay and early stopping.

    ``stop_unit`` is ``"epochs"`` for pretraining and ``"images"`` for
    fine-tuning. LR decay always counts epochs. Both counters reset only on a
    strict improvement, and a decay does not reset the stopping counter.
    """

    stop_patience: float = 100
    stop_unit: str = "epochs"
    lr_patience: int = 25
    lr_factor: float = 10.0
    best: float = math.inf
    since_best: float = 0
    epochs_since_lr: int = 0
    diagnostic: Optional[str] = None

    def __post_init__(self):
        if self.stop_unit not in ("epochs", "images"):
            raise ValueError(f"stop_unit must be 'epochs' or 'images', got {self.stop_unit!r}")

    def on_validation(self, val_loss: float, epochs: int = 0, images: int = 0) -> str:
        if not math.isfinite(val_loss):
            self.diagnostic = f"non-finite validation loss {val_loss}"
            return STOP
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self.epochs_since_lr = 0
            return CONTINUE
        self.since_best += epochs if self.stop_unit == "epochs" else images
        self.epochs_since_lr += epochs
        if self.since_best >= self.stop_patience:
            return STOP
        if self.lr_patience and self.epochs_since_lr >= self.lr_patience:
            self.epochs_since_lr = 0
            return REDUCE_LR
        return CONTINUE

    def apply(self, decision: str, adam: AdamState) -> None:
        if decision == REDUCE_LR:
            adam.alpha /= self.lr_factor
