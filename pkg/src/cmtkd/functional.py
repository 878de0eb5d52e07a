"""Convolutional-network primitives on top of :mod:`cmtkd.tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, add, flatten, record, relu, scalar_mul  # noqa: F401  (re-exported)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral output extent: ({size} + 2*{padding} - {k})/{stride} + 1"
        )
    return span // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw)."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back into an image."""
    out = np.zeros(shape, dtype=dwin.dtype)
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and FCkk weights, no bias."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter_windows(dcols, xp.shape, kh, kw, stride)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return record(np.ascontiguousarray(out), (x, weight), bw)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place by an
    exponential moving average (unbiased variance, as torch does).
    """
    if x.ndim != 4:
        raise ValueError("batch_norm2d expects NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm2d channel mismatch: input has {c} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm2d needs a batch of at least 2 in train mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if not x.requires_grad:
            return None, ggamma, gbeta
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv_std / count)[None, :, None, None] * (
                count * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight of shape (M, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    return record(out, parents, bw)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first (lowest linear index) maximum."""
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, 0)
    wo = _out_extent(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dwin = dwin.reshape(n, c, ho, wo, kernel, kernel)
        return (_scatter_windows(dwin, x.shape, kernel, kernel, stride),)

    return record(out, (x,), bw)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, 0)
    wo = _out_extent(w, kernel, stride, 0)
    out = _windows(x.data, kernel, kernel, stride).mean(axis=(-2, -1))
    area = kernel * kernel

    def bw(g):
        dwin = np.broadcast_to((g / area)[..., None, None], (n, c, ho, wo, kernel, kernel))
        return (_scatter_windows(dwin, x.shape, kernel, kernel, stride),)

    return record(out.astype(x.dtype, copy=False), (x,), bw)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to((g / area)[:, :, None, None], x.shape),)

    return record(x.data.mean(axis=(2, 3)), (x,), bw)


def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(z.data, axis)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(out, (z,), bw)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    p = np.exp(_log_softmax_np(z.data, axis))

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (z,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m})")
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
