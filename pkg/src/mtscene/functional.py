"""Differentiable NCHW kernels built on :mod:`mtscene.tensor`."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, default_dtype, tsum

Pair = Union[int, Tuple[int, int]]


def _pair(v: Pair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        if min(self.weight.shape[2:]) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("kernel and stride must be >= 1, padding >= 0")


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ValueError("running_var must be nonnegative")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integer or empty conv output extent: ({size}+2*{pad}-{k})/{stride}+1"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: Pair = 1, padding: Pair = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (F, C, kh, kw) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"input has {c} channels but weight expects {cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = conv_output_extent(h, kh, sh, ph)
    wo = conv_output_extent(w, kw, sw, pw)

    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wmat = weight.data.reshape(f, c * kh * kw)
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::sh, ::sw].transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, ph : ph + h, pw : pw + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv(x: Tensor, p: ConvParams) -> Tensor:
    return conv2d(x, p.weight, p.bias, p.stride, p.padding)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, p: BNParams, training: bool) -> Tensor:
    """Per-channel normalization over the N, H, W axes.

    In training mode the batch statistics are used and the running
    statistics are updated in place; in eval mode the running statistics
    are used.
    """
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"batch_norm: input shape {x.shape} does not match {p.gamma.shape[0]} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    gamma = p.gamma.data.reshape(1, -1, 1, 1)
    beta = p.beta.data.reshape(1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        m = p.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        p.running_mean.data[...] = (1 - m) * p.running_mean.data + m * mu.reshape(-1)
        p.running_var.data[...] = (1 - m) * p.running_var.data + m * unbiased.reshape(-1)
    else:
        centered = x.data - p.running_mean.data.reshape(1, -1, 1, 1)
        var = p.running_var.data.reshape(1, -1, 1, 1)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = centered * inv_std
    out = gamma * xhat + beta

    def backward(g):
        if p.gamma.requires_grad:
            p.gamma._accumulate((g * xhat).sum(axis=axes))
        if p.beta.requires_grad:
            p.beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                dx = inv_std * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                dx = dxhat * inv_std
            x._accumulate(dx)

    return Tensor._make(out, (x, p.gamma, p.beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# separable resampling: adaptive pooling and bilinear interpolation
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _pool_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=np.float64)
    scale = size / out
    for o in range(out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        x._accumulate(np.matmul(np.matmul(mh.T, g), mw))

    return Tensor._make(out, (x,), backward, op)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling to a fixed output grid.

    When the input extent is a multiple of the output extent the windows
    partition the input with kernel equal to stride. Otherwise windows
    follow the usual floor/ceil adaptive boundaries and may overlap.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("adaptive_avg_pool output extents must be >= 1")
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot pool {h}x{w} up to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return _separable(x, np.eye(h, dtype=x.dtype), np.eye(w, dtype=x.dtype), "adaptive_avg_pool")
    dt = x.data.dtype.type
    return _separable(x, _pool_matrix(h, out_h, dt), _pool_matrix(w, out_w, dt), "adaptive_avg_pool")


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (corners not aligned)."""
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    dt = x.data.dtype.type
    return _separable(x, _bilinear_matrix(h, out_h, dt), _bilinear_matrix(w, out_w, dt), "bilinear_upsample")


def upsample_like(x: Tensor, ref_shape) -> Tensor:
    h, w = ref_shape[-2:]
    if x.shape[-2:] == (h, w):
        return x
    return bilinear_upsample(x, h, w)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: NCHW -> NC."""
    h, w = x.shape[-2:]
    return tsum(x, axis=(2, 3)) * (1.0 / (h * w))


# ---------------------------------------------------------------------------
# softmax family and dense layers
# ---------------------------------------------------------------------------


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), backward, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    wt = weight.data.T
    out = x.data @ wt
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 1, dtype=None) -> np.ndarray:
    """Dense one-hot along ``axis``; labels outside [0, num_classes) give zeros."""
    dtype = dtype or default_dtype()
    labels = np.asarray(labels)
    valid = (labels >= 0) & (labels < num_classes)
    safe = np.where(valid, labels, 0)
    eye = np.eye(num_classes, dtype=dtype)[safe] * valid[..., None]
    return np.moveaxis(eye, -1, axis)


def constant(x, like: Tensor) -> Tensor:
    return as_tensor(np.asarray(x, dtype=like.data.dtype), like=like)
