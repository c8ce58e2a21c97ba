"""Layer modules wrapping the functional primitives."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..tensor import Tensor
from . import functional as F
from .module import Module, Parameter


class Conv2d(Module):
    def __init__(self, spec: F.Conv2dSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_ch // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(spec.weight_shape, "kaiming", fan_in=fan_in, dtype=dtype)
        self.bias = Parameter((spec.out_ch,), "zeros", dtype=dtype) if spec.bias else None

    @classmethod
    def make(cls, in_ch, out_ch, k=1, stride=1, padding=None, dilation=1, groups=1, bias=True, dtype=np.float32):
        if padding is None:
            padding = dilation * (k - 1) // 2
        return cls(F.Conv2dSpec(in_ch, out_ch, (k, k), stride, padding, dilation, groups, bias), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        if x.shape[1] != s.in_ch:
            raise ShapeError(f"conv expects {s.in_ch} input channels, got {x.shape[1]} (input {x.shape})")
        return F.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter((channels,), "ones", dtype=dtype)
        self.beta = Parameter((channels,), "zeros", dtype=dtype)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


class LayerNorm2d(Module):
    """Channel-wise layer norm applied independently at every pixel."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter((channels,), "ones", dtype=dtype)
        self.beta = Parameter((channels,), "zeros", dtype=dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.channel_layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter((out_features, in_features), "kaiming", fan_in=in_features, dtype=dtype)
        self.bias = Parameter((out_features,), "zeros", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvNormAct(Module):
    """Bias-free conv, batch norm, then activation."""

    def __init__(self, in_ch, out_ch, k=1, stride=1, dilation=1, groups=1, act="relu", dtype=np.float32):
        super().__init__()
        self.conv = Conv2d.make(in_ch, out_ch, k, stride, None, dilation, groups, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return F.activation(self.act, self.bn(self.conv(x)))
