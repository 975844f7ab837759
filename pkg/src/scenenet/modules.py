"""Stateful layer objects that cache activations for backpropagation.

Each module owns a ``params`` dict (learned arrays), a ``buffers`` dict
(non-learned state such as batch-norm running statistics) and, after
``backward``, a ``grads`` dict keyed like ``params``.  ``trace`` walks the
module statically for shape and cost analysis without touching data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import layers as F
from .tensor import DimensionError


@dataclass(frozen=True)
class LayerInfo:
    path: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    macs: int
    params: int


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Module:
    kind = "module"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self.params.items():
            yield _join(prefix, key), value
        for name, child in self.children():
            yield from child.named_params(_join(prefix, name))

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self.grads.items():
            yield _join(prefix, key), value
        for name, child in self.children():
            yield from child.named_grads(_join(prefix, name))

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self.buffers.items():
            yield _join(prefix, key), value
        for name, child in self.children():
            yield from child.named_buffers(_join(prefix, name))

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(_join(prefix, name))

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def macs(self, in_shape: tuple) -> int:
        return 0

    def trace(self, in_shape: tuple, prefix: str = "") -> Iterator[LayerInfo]:
        out = self.output_shape(in_shape)
        nparams = sum(int(v.size) for v in self.params.values())
        yield LayerInfo(prefix, self.kind, tuple(in_shape), tuple(out), self.macs(in_shape), nparams)


def kaiming_normal(rng, out_c, in_c, kh, kw, dtype):
    if rng is None:
        return np.zeros((out_c, in_c, kh, kw), dtype)
    std = np.sqrt(2.0 / (out_c * kh * kw))
    return (rng.standard_normal((out_c, in_c, kh, kw)) * std).astype(dtype)


class Conv2d(Module):
    kind = "conv"

    def __init__(self, in_c, out_c, k, stride=1, padding=None, rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.params["weight"] = kaiming_normal(rng, out_c, in_c, k, k, dtype)

    @property
    def conv(self) -> F.ConvParams:
        return F.ConvParams(self.params["weight"], self.stride, self.padding)

    def describe(self) -> str:
        o, i, kh, kw = self.params["weight"].shape
        return f"conv{kh}x{kw}({i}->{o}, stride {self.stride})"

    def forward(self, x, train=False):
        out, cols = F._conv_forward(x, self.conv)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad):
        shape, cols = self._cache
        gx, gw, _ = F._conv_backward(shape, cols, self.conv, grad)
        self.grads["weight"] = gw
        return gx

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        o, i, kh, kw = self.params["weight"].shape
        if c != i:
            raise DimensionError(f"conv expects {i} input channels, got {in_shape}")
        return (n, o, F.conv_output_size(h, kh, self.stride, self.padding),
                F.conv_output_size(w, kw, self.stride, self.padding))

    def macs(self, in_shape):
        _, o, oh, ow = self.output_shape(in_shape)
        _, i, kh, kw = self.params["weight"].shape
        return oh * ow * o * i * kh * kw


class DownsampleConv(Conv2d):
    """A convolution that halves spatial resolution.

    ``mode`` selects the mechanism; the weight tensor is identical for all:

    * ``strided`` - stride-2 convolution.
    * ``dilated`` - dilated pooling: the stride-1 convolution is applied to
      each of the four phase sub-grids and the results are summed.
    * ``avg`` / ``max`` - stride-1 convolution at full resolution followed by
      2x2 pooling; with ``pool_first`` the pooling runs before the
      convolution instead (used for 1x1 projections).
    """

    kind = "downsample_conv"

    def __init__(self, in_c, out_c, k, mode="strided", pool_first=False, rng=None, dtype=np.float32):
        if mode not in ("strided", "dilated", "avg", "max"):
            raise ValueError(f"unknown downsample mode {mode!r}")
        super().__init__(in_c, out_c, k, stride=2 if mode == "strided" else 1, rng=rng, dtype=dtype)
        self.mode = mode
        self.pool_first = pool_first
        self.kind = {"strided": "conv", "dilated": "dilated_pool_conv"}.get(mode, f"{mode}_pool_conv")

    def describe(self) -> str:
        o, i, kh, kw = self.params["weight"].shape
        if self.mode == "strided":
            return f"conv{kh}x{kw}({i}->{o}, stride 2)"
        if self.mode == "dilated":
            return f"dilated_pool conv{kh}x{kw}({i}->{o})"
        order = "pool->conv" if self.pool_first else "conv->pool"
        return f"{self.mode}_pool conv{kh}x{kw}({i}->{o}, {order})"

    def forward(self, x, train=False):
        if self.mode == "strided":
            return super().forward(x, train)
        if self.mode == "dilated":
            out, cols = F._dp_forward(x, self.conv)
            self._cache = cols
            return out
        if self.pool_first:
            pooled = F.pool2d(x, self.mode)
            out, cols = F._conv_forward(pooled, self.conv)
            self._cache = (x, pooled.shape, cols)
            return out
        full, cols = F._conv_forward(x, self.conv)
        self._cache = (full, x.shape, cols)
        return F.pool2d(full, self.mode)

    def backward(self, grad):
        if self.mode == "strided":
            return super().backward(grad)
        if self.mode == "dilated":
            gx, gw, _ = F._dp_backward(self._cache, self.conv, grad)
            self.grads["weight"] = gw
            return gx
        if self.pool_first:
            x, pooled_shape, cols = self._cache
            gp, gw, _ = F._conv_backward(pooled_shape, cols, self.conv, grad)
            self.grads["weight"] = gw
            return F.pool2d_backward(x, self.mode, gp)
        full, x_shape, cols = self._cache
        gfull = F.pool2d_backward(full, self.mode, grad)
        gx, gw, _ = F._conv_backward(x_shape, cols, self.conv, gfull)
        self.grads["weight"] = gw
        return gx

    def output_shape(self, in_shape):
        if self.mode == "strided":
            return super().output_shape(in_shape)
        n, c, h, w = in_shape
        if h % 2 or w % 2:
            raise DimensionError(f"{self.mode} downsampling needs even spatial dims, got {in_shape}")
        return super().output_shape((n, c, h // 2, w // 2))

    def macs(self, in_shape):
        if self.mode in ("strided", "dilated") or self.pool_first:
            # dilated pooling counts as sum-pool (free) + stride-1 conv at half resolution
            return super().macs(in_shape)
        o, i, kh, kw = self.params["weight"].shape
        return in_shape[2] * in_shape[3] * o * i * kh * kw


class BatchNorm2d(Module):
    kind = "batchnorm"

    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        super().__init__()
        bn = F.BatchNormParams.init(channels, dtype, eps, momentum)
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = bn.gamma
        self.params["beta"] = bn.beta
        self.buffers["running_mean"] = bn.running_mean
        self.buffers["running_var"] = bn.running_var

    @property
    def bn(self) -> F.BatchNormParams:
        return F.BatchNormParams(self.params["gamma"], self.params["beta"],
                                 self.buffers["running_mean"], self.buffers["running_var"],
                                 self.eps, self.momentum)

    def describe(self) -> str:
        return f"batchnorm({self.params['gamma'].shape[0]})"

    def forward(self, x, train=False):
        out, self._cache = F.batchnorm_forward(x, self.bn, "train" if train else "eval")
        return out

    def backward(self, grad):
        gx, gg, gb = F.batchnorm_backward(self._cache, grad)
        self.grads["gamma"] = gg
        self.grads["beta"] = gb
        return gx


class ReLU(Module):
    kind = "relu"

    def describe(self) -> str:
        return "relu"

    def forward(self, x, train=False):
        self._x = x
        return F.relu(x)

    def backward(self, grad):
        return F.relu_backward(self._x, grad)


class MaxPool(Module):
    kind = "maxpool"

    def __init__(self, size=3, stride=2, padding=1):
        super().__init__()
        self.size, self.stride, self.padding = size, stride, padding

    def describe(self) -> str:
        return f"maxpool{self.size}x{self.size}(stride {self.stride})"

    def forward(self, x, train=False):
        self._x = x
        return F.pool2d(x, "max", self.size, self.stride, self.padding)

    def backward(self, grad):
        return F.pool2d_backward(self._x, "max", grad, self.size, self.stride, self.padding)

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c, F.conv_output_size(h, self.size, self.stride, self.padding),
                F.conv_output_size(w, self.size, self.stride, self.padding))


class GlobalAvgPool(Module):
    kind = "global_avg_pool"

    def describe(self) -> str:
        return "global_avg_pool"

    def forward(self, x, train=False):
        self._shape = x.shape
        return F.global_avg_pool(x)

    def backward(self, grad):
        return F.global_avg_pool_backward(self._shape, grad)

    def output_shape(self, in_shape):
        return tuple(in_shape[:2])


class Linear(Module):
    kind = "linear"

    def __init__(self, in_f, out_f, rng=None, dtype=np.float32):
        super().__init__()
        if rng is None:
            self.params["weight"] = np.zeros((out_f, in_f), dtype)
            self.params["bias"] = np.zeros(out_f, dtype)
            return
        bound = 1.0 / np.sqrt(in_f)
        self.params["weight"] = rng.uniform(-bound, bound, (out_f, in_f)).astype(dtype)
        self.params["bias"] = rng.uniform(-bound, bound, out_f).astype(dtype)

    def describe(self) -> str:
        o, i = self.params["weight"].shape
        return f"linear({i}->{o})"

    def forward(self, x, train=False):
        self._x = x
        return F.linear(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = F.linear_backward(self._x, self.params["weight"], grad)
        self.grads["weight"] = gw
        self.grads["bias"] = gb
        return gx

    def output_shape(self, in_shape):
        return (in_shape[0], self.params["weight"].shape[0])

    def macs(self, in_shape):
        o, i = self.params["weight"].shape
        return i * o


class Sequential(Module):
    kind = "sequential"
    # when set to a list, forward appends the path of the first leaf emitting non-finite values
    _probe: Optional[list] = None

    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        self.layers = list(named)

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
            probe = Sequential._probe
            if probe is not None and not probe and not isinstance(layer, Sequential) and not np.all(np.isfinite(x)):
                probe.append(getattr(layer, "path", "?"))
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, in_shape):
        for _, layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def trace(self, in_shape, prefix=""):
        for name, layer in self.layers:
            records = list(layer.trace(in_shape, _join(prefix, name)))
            yield from records
            in_shape = layer.output_shape(in_shape)


class Residual(Module):
    """``relu(main(x) + shortcut(x))``; an absent shortcut is the identity."""

    kind = "residual"

    def __init__(self, main: Sequential, shortcut: Optional[Sequential] = None):
        super().__init__()
        self.main = main
        self.shortcut = shortcut
        self.act = ReLU()

    def children(self):
        kids = list(self.main.layers)
        if self.shortcut is not None:
            kids.append(("downsample", self.shortcut))
        return kids

    def forward(self, x, train=False):
        y = self.main.forward(x, train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.act.forward(y + s, train)

    def backward(self, grad):
        g = self.act.backward(grad)
        gx = self.main.backward(g)
        if self.shortcut is None:
            return gx + g
        return gx + self.shortcut.backward(g)

    def output_shape(self, in_shape):
        return self.main.output_shape(in_shape)

    def trace(self, in_shape, prefix=""):
        yield from self.main.trace(in_shape, prefix)
        if self.shortcut is not None:
            yield from self.shortcut.trace(in_shape, _join(prefix, "downsample"))
        out = self.output_shape(in_shape)
        yield LayerInfo(_join(prefix, "relu_out"), "relu", tuple(out), tuple(out), 0, 0)
