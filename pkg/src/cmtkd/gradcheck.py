"""Central finite differences against analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradReport:
    name: str
    rel_err: float
    analytic_norm: float
    numeric_norm: float


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    diff = float(np.linalg.norm(np.ravel(a - b)))
    scale = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), floor)
    return diff / scale


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6, index=None) -> np.ndarray:
    """d fn / d x by central differences; ``index`` restricts to some flat positions."""
    flat = x.data.reshape(-1)
    positions = range(flat.size) if index is None else index
    grad = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * eps)
    return grad.reshape(x.shape)


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_gradients(
    fn: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-6,
) -> list[GradReport]:
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    analytic = analytic_grads(fn, params)
    reports = []
    for name, p, a in zip(names, params, analytic):
        num = numerical_grad(fn, p, eps)
        reports.append(GradReport(name, relative_error(a, num), float(np.linalg.norm(a)), float(np.linalg.norm(num))))
    return reports
