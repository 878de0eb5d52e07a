"""Min-logit ensembling and temperature-scaled KL losses for mutual learning."""
from __future__ import annotations

import numpy as np

from .functional import _log_softmax_np, log_softmax, softmax
from .tensor import Tensor, mean, mul, tsum

DEFAULT_TEMPERATURE = 4.0


def _values(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def min_logit_ensemble(z_t, z_s, labels) -> np.ndarray:
    """Shift both logit sets so the target class sits at 0, then take the elementwise min.

    The result is a plain array: the ensemble is a fixed target, not part of
    the graph.
    """
    zt, zs = _values(z_t), _values(z_s)
    if zt.shape != zs.shape or zt.ndim != 2:
        raise ValueError(f"logit shapes differ: {zt.shape} vs {zs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    m = zt.shape[1]
    if labels.shape != (zt.shape[0],) or labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must be one per row and lie in [0, {m})")
    rows = np.arange(zt.shape[0])
    shifted_t = zt - zt[rows, labels][:, None]
    shifted_s = zs - zs[rows, labels][:, None]
    return np.minimum(shifted_t, shifted_s)


def soft_logits(z: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return softmax(mul(z, 1.0 / temperature))


def target_distribution(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return np.exp(_log_softmax_np(np.asarray(logits, dtype=np.float64) / temperature))


def scaled_kl(p_target: np.ndarray, log_q: Tensor, temperature: float) -> Tensor:
    """T^2 * batch-mean KL(p_target || q) for a fixed target and log-probabilities ``log_q``."""
    p = np.asarray(p_target, dtype=log_q.dtype)
    with np.errstate(divide="ignore"):
        log_p = np.where(p > 0, np.log(p), 0.0).astype(log_q.dtype)
    # sum p log p is a constant; keeping it makes the value a true KL
    neg_cross = tsum(mul(log_q, Tensor(p)), axis=1)
    entropy_term = Tensor(np.sum(p * log_p, axis=1))
    return mul(mean(entropy_term - neg_cross), float(temperature) ** 2)


def kl_to_target(p_target: np.ndarray, z: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return scaled_kl(p_target, log_softmax(mul(z, 1.0 / temperature)), temperature)


def mutual_kl_losses(z_bar: np.ndarray, z_t: Tensor, z_s: Tensor, temperature: float) -> tuple[Tensor, Tensor]:
    """(teacher loss, student loss), each T^2 * KL(p_bar || p) with p_bar from the fixed ensemble."""
    if isinstance(z_bar, Tensor):
        if z_bar.requires_grad:
            raise ValueError("the ensemble target must be detached")
        z_bar = z_bar.data
    p_bar = target_distribution(z_bar, temperature)
    return kl_to_target(p_bar, z_t, temperature), kl_to_target(p_bar, z_s, temperature)
