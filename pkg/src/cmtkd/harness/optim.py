"""SGD with momentum over parameter groups, learning-rate schedules, decay policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..tensor import Tensor

LOW_BIT_DECAY = 25e-6
DEFAULT_DECAY = 1e-4
NO_DECAY_SUFFIXES = ("gamma", "beta", "step", "rho")


def weight_decay_for_bits(bits: int | None) -> float:
    """25e-6 for 1- and 2-bit networks, 1e-4 otherwise (including full precision)."""
    return LOW_BIT_DECAY if bits is not None and bits <= 2 else DEFAULT_DECAY


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Tensor]]
    weight_decay: float = 0.0
    lr_scale: float = 1.0


def split_decay(prefix: str, named: Sequence[tuple[str, Tensor]], decay: float, lr_scale: float = 1.0) -> list[ParamGroup]:
    """Two groups: weights that decay and normalization/step/mixing parameters that do not."""
    dec = [(n, p) for n, p in named if not n.endswith(NO_DECAY_SUFFIXES)]
    rest = [(n, p) for n, p in named if n.endswith(NO_DECAY_SUFFIXES)]
    groups = []
    if dec:
        groups.append(ParamGroup(prefix, dec, decay, lr_scale))
    if rest:
        groups.append(ParamGroup(f"{prefix}/no_decay", rest, 0.0, lr_scale))
    return groups


@dataclass
class SGD:
    """Heavy-ball SGD, torch convention: buf = mu*buf + (g + wd*p); p -= lr*buf."""

    groups: list[ParamGroup]
    momentum: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            for n, p in g.params:
                if id(p) in seen:
                    raise ValueError(f"parameter {n} appears in more than one group")
                seen.add(id(p))

    def zero_grad(self) -> None:
        for g in self.groups:
            for _, p in g.params:
                p.grad = None

    def step(self, lr: float) -> None:
        for g in self.groups:
            glr = lr * g.lr_scale
            for name, p in g.params:
                if p.grad is None:
                    continue
                d = p.grad + g.weight_decay * p.data if g.weight_decay else p.grad
                key = f"{g.name}:{name}"
                buf = self.buffers.get(key)
                if buf is None:
                    buf = np.array(d, dtype=p.dtype)
                else:
                    buf *= self.momentum
                    buf += d
                self.buffers[key] = buf
                p.data -= glr * buf

    def grad_norms(self) -> dict[str, float]:
        out = {}
        for g in self.groups:
            sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for _, p in g.params if p.grad is not None)
            out[g.name] = math.sqrt(sq)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"optim.{k}": v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.buffers = {k[len("optim."):]: np.array(v) for k, v in state.items() if k.startswith("optim.")}


def lr_schedule(epoch: int, base_lr: float, epochs: int, schedule: str = "cosine", milestones: Sequence[int] = ()) -> float:
    """Step decay divides by 10 at every passed milestone; cosine anneals from base_lr towards 0."""
    if schedule == "step":
        passed = sum(1 for m in milestones if epoch >= m)
        return base_lr / 10.0**passed
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    raise ValueError(f"unknown schedule {schedule!r}")
