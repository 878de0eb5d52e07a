"""Intermediate-feature distillation losses: attention transfer and FitNet hints."""
from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from . import functional as F
from .nn import Module, parameter
from .tensor import Tensor, l2_norm, mean, reshape, square, tsum

log = logging.getLogger(__name__)

FEATURE_LOSSES = ("attention", "fitnet")


def attention_map(feat: Tensor) -> Tensor:
    """Channel-wise sum of squares, flattened per sample: (N, C, H, W) -> (N, H*W)."""
    n = feat.shape[0]
    return reshape(tsum(square(feat), axis=1), (n, -1))


def attention_loss(feat_t: Tensor, feat_s: Tensor) -> Tensor:
    """Batch mean of || q_t/||q_t|| - q_s/||q_s|| ||_2 over attention maps.

    Samples where either map is identically zero contribute 0.
    """
    if feat_t.shape[0] != feat_s.shape[0] or feat_t.shape[2:] != feat_s.shape[2:]:
        raise ValueError(f"attention maps differ in shape: {feat_t.shape} vs {feat_s.shape}")
    q_t, q_s = attention_map(feat_t), attention_map(feat_s)
    n_t, n_s = l2_norm(q_t), l2_norm(q_s)
    dead = (n_t.data == 0) | (n_s.data == 0)
    if dead.any():
        log.warning("zero-norm attention map in %d sample(s); their loss is set to 0", int(dead.sum()))
    pad = Tensor(dead.astype(q_t.dtype))
    u_t = q_t / reshape(n_t + pad, (-1, 1))
    u_s = q_s / reshape(n_s + pad, (-1, 1))
    per_sample = l2_norm(u_t - u_s)
    if dead.any():
        per_sample = per_sample * Tensor((~dead).astype(q_t.dtype))
    return mean(per_sample)


def identity_adapter(channels: int) -> np.ndarray:
    return np.eye(channels).reshape(channels, channels, 1, 1)


class FitNetAdapters(Module):
    """One full-precision 1x1 conv per fusion layer mapping student to teacher channels."""

    def __init__(self, channels: Mapping[int, int], dtype=np.float64):
        self.layers = tuple(sorted(channels))
        for k in self.layers:
            setattr(self, f"r{k}", parameter(identity_adapter(channels[k]), dtype))

    def weight(self, k: int) -> Tensor:
        return getattr(self, f"r{k}")

    def forward(self, feat: Tensor, k: int) -> Tensor:
        return F.conv2d(feat, self.weight(k))


def fitnet_loss(feat_t: Tensor, feat_s: Tensor, adapter: Tensor) -> Tensor:
    """Batch mean of the (non-squared) l2 distance between F_t and r(F_s)."""
    adapted = F.conv2d(feat_s, adapter)
    if adapted.shape != feat_t.shape:
        raise ValueError(f"adapted student map {adapted.shape} does not match teacher map {feat_t.shape}")
    diff = feat_t - adapted
    return mean(l2_norm(reshape(diff, (diff.shape[0], -1))))


def feature_distill_loss(
    teacher_feats: Mapping[int, Tensor],
    student_feats: Mapping[int, Tensor],
    kind: str = "attention",
    adapters: FitNetAdapters | None = None,
) -> Tensor:
    """Sum over fusion layers of the selected per-layer distance."""
    if set(teacher_feats) != set(student_feats):
        raise ValueError(f"layer sets differ: {sorted(teacher_feats)} vs {sorted(student_feats)}")
    if kind not in FEATURE_LOSSES:
        raise ValueError(f"unknown feature loss {kind!r}")
    if kind == "fitnet" and adapters is None:
        raise ValueError("fitnet loss needs adapters")
    total = None
    for k in sorted(teacher_feats):
        if kind == "attention":
            term = attention_loss(teacher_feats[k], student_feats[k])
        else:
            term = fitnet_loss(teacher_feats[k], student_feats[k], adapters.weight(k))
        total = term if total is None else total + term
    return total
