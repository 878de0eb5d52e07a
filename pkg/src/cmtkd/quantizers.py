"""Low bit-width quantizers with straight-through gradients.

Two schemes are provided:

* ``hwgq`` -- uniform levels designed once for a unit Gaussian and rescaled by
  the standard deviation of the tensor being quantized.  Half-wave (activation)
  quantizers send non-positive inputs to 0 and positive inputs to the nearest
  of ``2**b - 1`` positive levels ``{d, 2d, ...}``; full-wave (weight)
  quantizers use ``2**b`` levels symmetric about zero.
* ``lsq`` -- uniform quantizer with a trainable step size.

``bits=None`` means full precision: half-wave becomes ReLU and full-wave the
identity.
"""
from __future__ import annotations

import contextlib
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from .nn import Module
from .tensor import Tensor, record, relu

SCHEMES = ("hwgq", "lsq")
MAX_DESIGN_BITS = 8

_relaxed = False


@contextlib.contextmanager
def relaxed_rounding():
    """Replace rounding with the identity so quantizers become exactly differentiable.

    HWGQ collapses to its full-precision counterpart; LSQ keeps its clipping
    rails, drops the rounding and the gradient scale.  Used for
    finite-difference checks of whole networks.
    """
    global _relaxed
    prev, _relaxed = _relaxed, True
    try:
        yield
    finally:
        _relaxed = prev


def is_relaxed() -> bool:
    return _relaxed


# ---------------------------------------------------------------------------
# level design


@dataclass(frozen=True)
class GaussianLevels:
    bits: int
    half_wave: bool
    step: float
    levels: np.ndarray  # quantizer output values for a unit-variance input, ascending
    thresholds: np.ndarray  # decision boundaries between consecutive levels
    mse: float

    @property
    def max_level(self) -> float:
        return float(self.levels[-1])


def level_values(step: float, bits: int, half_wave: bool) -> np.ndarray:
    if half_wave:
        return step * np.arange(1, 2**bits, dtype=np.float64)
    count = 2**bits
    return step * (np.arange(count, dtype=np.float64) - (count - 1) / 2.0)


def _phi(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(np.isinf(x), 0.0, np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi))


def quantization_mse(step: float, bits: int, half_wave: bool) -> float:
    """E[(t - Q(x))^2] for x ~ N(0, 1), evaluated with closed-form Gaussian moments.

    The target ``t`` is ``max(x, 0)`` for half-wave quantizers (the negative
    half is reproduced exactly by level 0) and ``x`` otherwise.
    """
    q = level_values(step, bits, half_wave)
    mids = (q[:-1] + q[1:]) / 2.0
    lo = np.concatenate([[0.0 if half_wave else -np.inf], mids])
    hi = np.concatenate([mids, [np.inf]])
    p0 = ndtr(hi) - ndtr(lo)
    # tails: sf form keeps precision far from the origin
    p0 = np.where(lo > 0, ndtr(-lo) - ndtr(-hi), p0)
    phi_lo, phi_hi = _phi(lo), _phi(hi)
    p1 = phi_lo - phi_hi
    lo_phi = np.where(np.isinf(lo), 0.0, np.nan_to_num(lo) * phi_lo)
    hi_phi = np.where(np.isinf(hi), 0.0, np.nan_to_num(hi) * phi_hi)
    p2 = p0 + lo_phi - hi_phi
    return float(np.sum(p2 - 2.0 * q * p1 + q * q * p0))


@functools.lru_cache(maxsize=None)
def design_gaussian_levels(bits: int, half_wave: bool) -> GaussianLevels:
    """MSE-optimal uniform level set for a unit Gaussian, cached per (bits, half_wave)."""
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= MAX_DESIGN_BITS:
        raise ValueError(f"bits must be an integer in [1, {MAX_DESIGN_BITS}], got {bits!r}")
    bits = int(bits)
    # bracket on a coarse grid, then polish; the objective is smooth in the step
    grid = np.linspace(1e-3, 4.0, 800) if bits < 6 else np.geomspace(1e-4, 0.5, 800)
    values = [quantization_mse(d, bits, half_wave) for d in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(
        lambda d: quantization_mse(d, bits, half_wave),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12},
    )
    step = float(res.x)
    levels = level_values(step, bits, half_wave)
    levels.setflags(write=False)
    thresholds = (levels[:-1] + levels[1:]) / 2.0
    thresholds.setflags(write=False)
    return GaussianLevels(bits, half_wave, step, levels, thresholds, float(res.fun))


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class QuantizerSpec:
    scheme: str = "hwgq"
    bits: int | None = None
    half_wave: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown quantizer scheme {self.scheme!r}")
        if self.bits is not None and self.bits < 1:
            raise ValueError("bits must be >= 1 or None for full precision")

    @property
    def full_precision(self) -> bool:
        return self.bits is None

    @property
    def levels(self) -> GaussianLevels:
        return design_gaussian_levels(self.bits, self.half_wave)


def lsq_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


# ---------------------------------------------------------------------------
# HWGQ


def hwgq_ste_mask(x: np.ndarray, sigma: float, spec: QuantizerSpec) -> np.ndarray:
    """Where the clipped straight-through estimator lets gradient pass."""
    top = sigma * spec.levels.max_level
    if spec.half_wave:
        return (x >= 0) & (x <= top)
    return (x >= -top) & (x <= top)


def _level_index(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Number of thresholds strictly below each x (a value on a boundary takes the lower level).

    Same result as ``searchsorted(thresholds, x, side="left")``; the uniform
    spacing gives a guess that is then corrected against the real boundaries.
    """
    n = thresholds.size
    if n == 0:
        return np.zeros(x.shape, dtype=np.intp)
    if n == 1:
        return (x > thresholds[0]).astype(np.intp)
    spacing = (thresholds[-1] - thresholds[0]) / (n - 1)
    guess = np.floor((x - thresholds[0]) / spacing) + 1
    idx = np.clip(guess, 0, n).astype(np.intp)
    padded = np.concatenate([[-np.inf], thresholds, [np.inf]]).astype(x.dtype)
    # idx is right when thresholds[idx-1] < x <= thresholds[idx]
    idx += x > padded[idx + 1]
    idx -= x <= padded[idx]
    return idx


def hwgq_forward(x: np.ndarray, spec: QuantizerSpec) -> tuple[np.ndarray, float]:
    """Quantized values and the per-tensor population std used to scale the levels."""
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    sigma = float(x.std())
    if sigma == 0.0:
        return np.zeros_like(x), 0.0
    lv = spec.levels
    levels = (sigma * lv.levels).astype(x.dtype)
    out = levels[_level_index(x, (sigma * lv.thresholds).astype(x.dtype))]
    if spec.half_wave:
        out = np.where(x > 0, out, 0).astype(x.dtype, copy=False)
    return out, sigma


def hwgq_backward(upstream: np.ndarray, x: np.ndarray, sigma: float, spec: QuantizerSpec) -> np.ndarray:
    if upstream.shape != x.shape:
        raise ValueError(f"gradient shape {upstream.shape} does not match input {x.shape}")
    if sigma == 0.0:
        return np.zeros_like(upstream)
    return upstream * hwgq_ste_mask(x, sigma, spec)


def hwgq_quantize(x: Tensor, spec: QuantizerSpec) -> Tensor:
    if spec.scheme != "hwgq":
        raise ValueError("hwgq_quantize needs an hwgq spec")
    if spec.full_precision or _relaxed:
        return relu(x) if spec.half_wave else x
    out, sigma = hwgq_forward(x.data, spec)
    return record(out, (x,), lambda g: (hwgq_backward(g, x.data, sigma, spec),))


# ---------------------------------------------------------------------------
# LSQ


def lsq_init_step(x: np.ndarray, bits: int, signed: bool) -> float:
    _, qp = lsq_range(bits, signed)
    return float(2.0 * np.abs(x).mean() / math.sqrt(max(qp, 1)))


def lsq_quantize(x: Tensor, step: Tensor, bits: int, signed: bool, count: int | None = None) -> Tensor:
    """round(clip(x/s, Qn, Qp)) * s with the learned-step-size gradient.

    ``count`` is the number of elements the gradient scale is computed from
    (defaults to ``x.size``).  Under :func:`relaxed_rounding` the rounding and
    the gradient scale are dropped, leaving clip(x/s)*s.
    """
    s = float(step.data.reshape(-1)[0])
    if s <= 0:
        raise ValueError(f"LSQ step size must be positive, got {s}")
    qn, qp = lsq_range(bits, signed)
    v = x.data / s
    below, above = v <= qn, v >= qp
    c = np.clip(v, qn, qp)
    r = c if _relaxed else np.round(c)
    out = (r * s).astype(x.dtype, copy=False)
    if _relaxed:
        scale = 1.0
    else:
        scale = 1.0 / math.sqrt((count or x.size) * max(qp, 1))
    inside = ~(below | above)
    ds_elem = np.where(below, qn, np.where(above, qp, r - v))

    def bw(g):
        gx = g * inside if x.requires_grad else None
        gs = np.full(step.shape, np.sum(g * ds_elem) * scale, dtype=step.dtype) if step.requires_grad else None
        return gx, gs

    return record(out, (x, step), bw)


# ---------------------------------------------------------------------------
# per-layer application


class LayerQuantizer(Module):
    """Quantizer for one weight or activation tensor of one layer.

    ``enabled=False`` marks a full-precision layer (first conv weights, the
    classifier); it then acts as identity for weights and ReLU for
    activations.  LSQ quantizers own a step-size parameter that is set from
    the first tensor they see.
    """

    def __init__(self, spec: QuantizerSpec, enabled: bool = True, dtype=np.float64):
        self.spec = spec
        self.enabled = enabled and not spec.full_precision
        self.step: Tensor | None = None
        self.register_buffer("initialized", np.zeros((), dtype=np.bool_))
        if self.enabled and spec.scheme == "lsq":
            self.step = Tensor(np.ones(1, dtype=dtype), requires_grad=True)

    @property
    def signed(self) -> bool:
        return not self.spec.half_wave

    def forward(self, x: Tensor, per_sample: bool = False) -> Tensor:
        return quantize_layer(x, self, per_sample=per_sample)


def quantize_layer(x: Tensor, quantizer: LayerQuantizer, per_sample: bool = False) -> Tensor:
    """Apply a layer's quantizer, or its full-precision stand-in when disabled."""
    spec = quantizer.spec
    if not quantizer.enabled:
        return relu(x) if spec.half_wave else x
    if spec.scheme == "hwgq":
        return hwgq_quantize(x, spec)
    if not quantizer.initialized:
        quantizer.step.data[...] = lsq_init_step(x.data, spec.bits, quantizer.signed)
        quantizer.initialized[...] = True
    count = x.size // x.shape[0] if per_sample else x.size
    return lsq_quantize(x, quantizer.step, spec.bits, quantizer.signed, count=count)
