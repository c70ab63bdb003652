"""
optim.py — Adam with bias correction.

A tensor whose gradient contains NaN/inf is skipped for that step (its moments
and step count are left alone) and the skip counter is incremented.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from app.core.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Update `param` in place. Returns False (and leaves everything untouched) on a non-finite grad."""
    if not np.all(np.isfinite(grad)):
        return False
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


@dataclass
class Adam:
    params: list[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"Adam learning rate must be > 0, got {self.lr}")
        if not self.states:
            self.states = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self) -> None:
        for p, state in zip(self.params, self.states):
            if p.grad is None:
                continue
            if not adam_step(p.data, p.grad, state, self.lr, self.beta1, self.beta2, self.eps):
                self.skipped += 1
                logger.warning("Adam: non-finite gradient on %s, step skipped (total=%d)",
                               p.name, self.skipped)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p, state in zip(self.params, self.states):
            out[f"{prefix}.m.{p.name}"] = state.m.copy()
            out[f"{prefix}.v.{p.name}"] = state.v.copy()
            out[f"{prefix}.t.{p.name}"] = np.array([float(state.t)])
        return out

    def load_state_dict(self, prefix: str, stored: dict[str, np.ndarray]) -> None:
        for p, state in zip(self.params, self.states):
            state.m = stored[f"{prefix}.m.{p.name}"].copy()
            state.v = stored[f"{prefix}.v.{p.name}"].copy()
            state.t = int(stored[f"{prefix}.t.{p.name}"][0])
