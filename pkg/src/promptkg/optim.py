"""Adam with fixed moment constants; frozen parameters are never touched."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: list[Parameter], lr: float, state: AdamState) -> None:
    """One Adam update over ``params``, then clear every gradient."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - BETA1 ** t
    bias2 = 1.0 - BETA2 ** t
    for p in params:
        grad = p.grad
        p.grad = None
        if p.frozen or grad is None:
            continue
        m = state.first.get(p.name)
        v = state.second.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = BETA1 * m + (1.0 - BETA1) * grad
        v = BETA2 * v + (1.0 - BETA2) * grad * grad
        state.first[p.name] = m
        state.second[p.name] = v
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + EPS)


def zero_grad(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None
