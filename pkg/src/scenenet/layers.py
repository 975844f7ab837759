"""Functional forward/backward kernels for the layers used by the networks.

Every kernel works on rank-4 ``(n, c, h, w)`` arrays (the linear and
loss kernels take ``(n, features)``) and is dtype-preserving, so the same
code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, ValidationError, check4

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "PhaseGrids",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "pool2d",
    "pool2d_backward",
    "phase_decompose",
    "reassemble",
    "dilated_pooling",
    "dilated_pooling_backward",
    "relu",
    "relu_backward",
    "linear",
    "linear_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "softmax",
    "softmax_cross_entropy",
]


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise DimensionError(f"conv weight must be (out, in, kh, kw), got {self.weight.shape}")
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise DimensionError(f"invalid stride {self.stride} / padding {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class PhaseGrids(NamedTuple):
    g00: np.ndarray
    g01: np.ndarray
    g10: np.ndarray
    g11: np.ndarray


def _pair(v) -> tuple[int, int]:
    if np.isscalar(v):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# -- convolution ----------------------------------------------------------------

def _im2col(x, kh, kw, sh, sw, ph, pw):
    """Columns laid out ``(n, c*kh*kw, oh*ow)`` so the conv is a batched matmul."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {kh}x{kw} with padding ({ph}, {pw}) does not fit input {h}x{w}")
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        return x.reshape(n, c, h * w), oh, ow
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _conv_forward(x, p: ConvParams):
    check4(x, "conv input")
    out_c, in_c, kh, kw = p.weight.shape
    if x.shape[1] != in_c:
        raise DimensionError(f"conv expects {in_c} input channels, got input shape {x.shape}")
    cols, oh, ow = _im2col(x, kh, kw, *p.stride, *p.padding)
    out = np.matmul(p.weight.reshape(out_c, -1), cols)
    if p.bias is not None:
        out += p.bias[:, None]
    return out.reshape(x.shape[0], out_c, oh, ow), cols


def _conv_backward(x_shape, cols, p: ConvParams, grad_out):
    n, c, h, w = x_shape
    out_c, _, kh, kw = p.weight.shape
    sh, sw = p.stride
    ph, pw = p.padding
    oh, ow = grad_out.shape[2:]
    g = grad_out.reshape(n, out_c, oh * ow)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    gcols = np.matmul(p.weight.reshape(out_c, -1).T, g)
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        return gcols.reshape(x_shape), grad_w, grad_b
    gcols = gcols.reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw] += gcols[:, :, u, v]
    grad_x = gxp[:, :, ph:ph + h, pw:pw + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Zero-padded strided cross-correlation, ``out[n, o, i, j] = sum w * x_pad``."""
    return _conv_forward(x, p)[0]


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_bias)``; ``grad_bias`` is None for bias-free convs."""
    check4(grad_out, "grad_out")
    out_c, _, kh, kw = p.weight.shape
    cols, oh, ow = _im2col(check4(x), kh, kw, *p.stride, *p.padding)
    expected = (x.shape[0], out_c, oh, ow)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    return _conv_backward(x.shape, cols, p, grad_out)


# -- batch normalisation -------------------------------------------------------

def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    """Normalise per channel.  Returns ``(out, cache)``.

    In train mode the batch statistics are used and the running statistics
    in ``p`` are updated in place (unbiased variance for the running
    estimate).  In eval mode the running statistics are used.
    """
    check4(x, "batchnorm input")
    if x.shape[1] != p.channels:
        raise DimensionError(f"batchnorm has {p.channels} channels, input shape {x.shape}")
    bshape = (1, -1, 1, 1)
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DimensionError("train-mode batchnorm needs at least two values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var * (count / (count - 1))
    elif mode == "eval":
        mean = p.running_mean
        var = p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * p.gamma.reshape(bshape) + p.beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (mode, xhat, inv_std, p.gamma)


def batchnorm_backward(cache, grad_out: np.ndarray):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    mode, xhat, inv_std, gamma = cache
    bshape = (1, -1, 1, 1)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma.reshape(bshape)
    if mode == "eval":
        return gxhat * inv_std.reshape(bshape), grad_gamma, grad_beta
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_x = (inv_std.reshape(bshape) / count) * (
        count * gxhat
        - gxhat.sum(axis=(0, 2, 3)).reshape(bshape)
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# -- pooling -----------------------------------------------------------------

def _check_even(x, what):
    check4(x, what)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"{what} needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")


def _max_windows(x, size, stride, padding):
    n, c, h, w = x.shape
    oh = conv_output_size(h, size, stride, padding)
    ow = conv_output_size(w, size, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"pool window {size} does not fit input {h}x{w}")
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.reshape(n, c, oh, ow, size * size)


def pool2d(x: np.ndarray, kind: str = "max", size: int = 2, stride: int = 2, padding: int = 0) -> np.ndarray:
    """Max / average / sum pooling.

    The ``avg`` and ``sum`` kinds support only the 2x2 stride-2 window used
    by the networks.  ``max`` also accepts the stem's 3x3 stride-2 pad-1
    window (padding acts as negative infinity).
    """
    check4(x, "pool input")
    if kind == "max" and (size, stride, padding) != (2, 2, 0):
        return _max_windows(x, size, stride, padding).max(axis=-1)
    if (size, stride, padding) != (2, 2, 0):
        raise DimensionError(f"{kind} pooling supports only a 2x2 stride-2 window")
    _check_even(x, f"{kind}-pool input")
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    if kind == "max":
        return blocks.max(axis=(3, 5))
    if kind == "sum":
        return blocks.sum(axis=(3, 5))
    if kind == "avg":
        return blocks.mean(axis=(3, 5))
    raise ValueError(f"unknown pool kind {kind!r}")


def pool2d_backward(x, kind, grad_out, size: int = 2, stride: int = 2, padding: int = 0) -> np.ndarray:
    """Gradient of :func:`pool2d`.  Max routes to the first maximum in row-major window order."""
    check4(grad_out, "grad_out")
    if kind == "max":
        idx = np.argmax(_max_windows(x, size, stride, padding), axis=-1)
        n, c, h, w = x.shape
        oh, ow = idx.shape[2:]
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
        for u in range(size):
            for v in range(size):
                hit = idx == (u * size + v)
                gxp[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride] += grad_out * hit
        return gxp[:, :, padding:padding + h, padding:padding + w].copy()
    if (size, stride, padding) != (2, 2, 0):
        raise DimensionError(f"{kind} pooling supports only a 2x2 stride-2 window")
    _check_even(x, f"{kind}-pool input")
    scale = 0.25 if kind == "avg" else 1.0
    if kind not in ("avg", "sum"):
        raise ValueError(f"unknown pool kind {kind!r}")
    g = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3)
    return g * g.dtype.type(scale)


# -- dilated pooling ------------------------------------------------------------

def phase_decompose(x: np.ndarray) -> PhaseGrids:
    """Split ``x`` into its four (row parity, column parity) sub-grids."""
    _check_even(x, "phase_decompose input")
    return PhaseGrids(
        np.ascontiguousarray(x[:, :, 0::2, 0::2]),
        np.ascontiguousarray(x[:, :, 0::2, 1::2]),
        np.ascontiguousarray(x[:, :, 1::2, 0::2]),
        np.ascontiguousarray(x[:, :, 1::2, 1::2]),
    )


def reassemble(grids: PhaseGrids) -> np.ndarray:
    g00 = grids[0]
    n, c, h2, w2 = g00.shape
    x = np.empty((n, c, 2 * h2, 2 * w2), dtype=g00.dtype)
    x[:, :, 0::2, 0::2] = grids[0]
    x[:, :, 0::2, 1::2] = grids[1]
    x[:, :, 1::2, 0::2] = grids[2]
    x[:, :, 1::2, 1::2] = grids[3]
    return x


def _check_dp(x, p: ConvParams):
    _check_even(x, "dilated_pooling input")
    kh, kw = p.weight.shape[2:]
    if p.stride != (1, 1):
        raise DimensionError(f"dilated_pooling needs a stride-1 convolution, got stride {p.stride}")
    if p.padding != (kh // 2, kw // 2):
        raise DimensionError(f"dilated_pooling needs half-kernel padding {(kh // 2, kw // 2)}, got {p.padding}")


def _dp_forward(x, p: ConvParams):
    _check_dp(x, p)
    shared = ConvParams(p.weight, p.stride, p.padding)
    out = None
    cols = []
    for grid in phase_decompose(x):
        y, c = _conv_forward(grid, shared)
        cols.append((grid.shape, c))
        out = y if out is None else out + y
    if p.bias is not None:
        out += p.bias.reshape(1, -1, 1, 1)
    return out, cols


def _dp_backward(cols, p: ConvParams, grad_out):
    shared = ConvParams(p.weight, p.stride, p.padding)
    grad_grids = []
    grad_w = np.zeros_like(p.weight)
    for shape, c in cols:
        gx, gw, _ = _conv_backward(shape, c, shared, grad_out)
        grad_grids.append(gx)
        grad_w += gw
    grad_b = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return reassemble(PhaseGrids(*grad_grids)), grad_w, grad_b


def dilated_pooling(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Convolve each phase sub-grid with the same weights and sum the four results.

    Output resolution is half the input.  A bias, if present, is added once
    after the branches are merged.
    """
    return _dp_forward(x, p)[0]


def dilated_pooling_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_bias)``; ``grad_w`` is summed over the four branches."""
    out, cols = _dp_forward(x, p)
    if grad_out.shape != out.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward output {out.shape}")
    return _dp_backward(cols, p, grad_out)


# -- pointwise / head --------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects (n, {weight.shape[1]}) input, got {x.shape}")
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out


def linear_backward(x, weight, grad_out, has_bias: bool = True):
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check4(x, "global_avg_pool input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    g = grad_out.reshape(n, c, 1, 1) / grad_out.dtype.type(h * w)
    return np.broadcast_to(g, x_shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` may be ``(n, C)`` or ``(n, C, 1, 1)``; the gradient has the
    same shape.
    """
    shape = logits.shape
    if logits.ndim == 4:
        if shape[2:] != (1, 1):
            raise DimensionError(f"4-D logits must be (n, C, 1, 1), got {shape}")
        logits = logits.reshape(shape[:2])
    n, classes = logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValidationError(f"labels must lie in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.reshape(shape)
