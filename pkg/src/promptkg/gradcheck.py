"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> dict[int, float]:
    """Relative error per input between tape gradients and finite differences."""
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    return {i: relative_error(a, numeric_grad(fn, t, h)) for i, (t, a) in enumerate(zip(tensors, analytic))}
