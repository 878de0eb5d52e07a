"""Importance-weighted fusion of teacher feature maps."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .functional import _log_softmax_np, softmax
from .nn import Module, parameter
from .tensor import Tensor


class ImportanceFactors(Module):
    """Raw logits rho[k, i] for fusion layer k and teacher i.

    Only the logits are stored; the mixing weights pi = softmax(rho[k]) are
    derived on every use, so they always sum to one.
    """

    def __init__(self, num_layers: int, num_teachers: int, dtype=np.float64):
        if num_layers < 1 or num_teachers < 1:
            raise ValueError("need at least one fusion layer and one teacher")
        self.rho = parameter(np.zeros((num_layers, num_teachers)), dtype)

    @property
    def num_teachers(self) -> int:
        return self.rho.shape[1]

    def logits(self, layer: int) -> Tensor:
        return self.rho[layer]

    def weights(self) -> np.ndarray:
        """Current pi as a (layers, teachers) array."""
        return np.exp(_log_softmax_np(self.rho.data.astype(np.float64), axis=1))

    def set_one_hot(self, teacher: int) -> None:
        """Put all weight on one teacher at every layer (exactly, in floating point)."""
        self.rho.data[...] = -1e4
        self.rho.data[:, teacher] = 0.0


def fuse(activations: Sequence[Tensor], logits: Tensor) -> Tensor:
    """F = sum_i softmax(logits)_i * A_i, summed in ascending teacher order."""
    if not activations:
        raise ValueError("fuse needs at least one activation")
    shape = activations[0].shape
    for i, a in enumerate(activations):
        if a.shape != shape:
            raise ValueError(f"activation {i} has shape {a.shape}, expected {shape}")
    if logits.shape != (len(activations),):
        raise ValueError(f"expected {len(activations)} logits, got shape {logits.shape}")
    pi = softmax(logits)
    out = pi[0] * activations[0]
    for i in range(1, len(activations)):
        out = out + pi[i] * activations[i]
    return out
