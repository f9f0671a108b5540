"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from tame.autodiff.tensor import Tensor, backward


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Estimate d fn() / d tensor by perturbing ``tensor.data`` in place, element by element."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    fn: Callable[[], Tensor], tensors: Iterable[Tensor], eps: float = 1e-3, floor: float = 1e-8
) -> dict[int, float]:
    """Max relative error between backward() and central differences, per tensor position."""
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    return {
        i: float(relative_error(a, numerical_gradient(fn, t, eps), floor).max())
        for i, (t, a) in enumerate(zip(tensors, analytic))
    }
