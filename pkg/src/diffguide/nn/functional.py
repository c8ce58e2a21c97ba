"""Differentiable neural-network primitives on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ContractError, ShapeError
from ..tensor import Tensor, add_flops, make_result


@dataclass(frozen=True)
class Conv2dSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        for name in ("in_ch", "out_ch", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ContractError(f"Conv2dSpec.{name} must be positive")
        if self.padding < 0 or min(self.kernel) < 1:
            raise ContractError("Conv2dSpec padding must be >= 0 and kernel >= 1")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ContractError(f"channels ({self.in_ch}, {self.out_ch}) not divisible by groups={self.groups}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch // self.groups) + tuple(self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return ho, wo


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window(arr: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    r, c = i * dilation, j * dilation
    return arr[:, :, r : r + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation (no kernel flip) with zero padding.

    ``weight`` has shape ``[Cout, Cin / groups, kh, kw]``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = weight.shape
    if cin % groups or cout % groups or cpg != cin // groups:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape} and groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output size {ho}x{wo} is not positive for input H={h}, W={w}, "
            f"kernel={kh}x{kw}, stride={stride}, padding={padding}, dilation={dilation}"
        )
    add_flops(2 * n * cout * cpg * kh * kw * ho * wo)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    depthwise = groups == cin and cpg == 1 and cout == cin
    pointwise = kh == kw == 1 and stride == 1 and padding == 0

    if depthwise:
        out = _dw_forward(xp, wd, ho, wo, stride, dilation)
    elif groups == 1 and pointwise:
        out = np.matmul(wd.reshape(cout, cin), xd.reshape(n, cin, h * w)).reshape(n, cout, h, w)
    elif groups == 1:
        cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
        out = np.matmul(wd.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    else:
        out = np.concatenate(
            [
                _dense_forward(xp[:, g * cpg : (g + 1) * cpg], wd[g * (cout // groups) : (g + 1) * (cout // groups)],
                               ho, wo, stride, dilation)
                for g in range(groups)
            ],
            axis=1,
        )
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gx = gw = None
        if depthwise:
            gxp, gw = _dw_backward(g, xp, wd, ho, wo, stride, dilation, need_x=x.requires_grad)
        elif groups == 1 and pointwise:
            g3 = g.reshape(n, cout, h * w)
            x3 = xd.reshape(n, cin, h * w)
            gxp = np.matmul(wd.reshape(cout, cin).T, g3).reshape(xd.shape) if x.requires_grad else None
            gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(wd.shape)
        else:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            gw = np.empty_like(wd)
            og = cout // groups
            for gi in range(groups):
                cs, os_ = slice(gi * cpg, (gi + 1) * cpg), slice(gi * og, (gi + 1) * og)
                sub_gx, gw[os_] = _dense_backward(
                    g[:, os_], xp[:, cs], wd[os_], ho, wo, stride, dilation, need_x=x.requires_grad
                )
                if gxp is not None:
                    gxp[:, cs] += sub_gx
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw)


def _im2col(xp, kh, kw, ho, wo, stride, dilation):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = _window(xp, i, j, ho, wo, stride, dilation)
    return cols.reshape(n, c * kh * kw, ho * wo)


def _dense_forward(xp, wd, ho, wo, stride, dilation):
    cout, _, kh, kw = wd.shape
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    return np.matmul(wd.reshape(cout, -1), cols).reshape(xp.shape[0], cout, ho, wo)


def _dense_backward(g, xp, wd, ho, wo, stride, dilation, need_x=True):
    n = xp.shape[0]
    cout, cin, kh, kw = wd.shape
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    g3 = g.reshape(n, cout, ho * wo)
    gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
    if not need_x:
        return None, gw
    gcols = np.matmul(wd.reshape(cout, -1).T, g3).reshape(n, cin, kh * kw, ho, wo)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, ho, wo, stride, dilation)[...] += gcols[:, :, i * kw + j]
    return gxp, gw


def _dw_forward(xp, wd, ho, wo, stride, dilation):
    _, _, kh, kw = wd.shape
    out = None
    for i in range(kh):
        for j in range(kw):
            term = _window(xp, i, j, ho, wo, stride, dilation) * wd[:, 0, i, j][None, :, None, None]
            out = term if out is None else out + term
    return out


def _dw_backward(g, xp, wd, ho, wo, stride, dilation, need_x=True):
    _, _, kh, kw = wd.shape
    gw = np.empty_like(wd)
    gxp = np.zeros_like(xp) if need_x else None
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, ho, wo, stride, dilation)
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win)
            if need_x:
                _window(gxp, i, j, ho, wo, stride, dilation)[...] += g * wd[:, 0, i, j][None, :, None, None]
    return gxp, gw


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = T.matmul(x, T.transpose(weight, (1, 0)))
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool(kind: str, x: Tensor, window: int | None = None, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max/avg window pooling, or global pooling to ``[N, C, 1, 1]``."""
    if kind == "global_avg":
        return T.reduce("mean", x, (2, 3), keepdims=True)
    if kind == "global_max":
        return T.reduce("max", x, (2, 3), keepdims=True)
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pool kind '{kind}'")
    if window is None or window < 1:
        raise ContractError("window pooling needs a positive window")
    stride = stride or window
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"pool window {window} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    xd = x.data
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else xd

    if kind == "avg":
        out = sum(_window(xp, i, j, ho, wo, stride, 1) for i in range(window) for j in range(window)) / (window * window)

        def bw_avg(g):
            gxp = np.zeros_like(xp)
            share = g / (window * window)
            for i in range(window):
                for j in range(window):
                    _window(gxp, i, j, ho, wo, stride, 1)[...] += share
            return (gxp[:, :, padding : padding + h, padding : padding + w],)

        return make_result(out, (x,), bw_avg)

    out = np.full((n, c, ho, wo), -np.inf, dtype=xd.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(window):
        for j in range(window):
            win = _window(xp, i, j, ho, wo, stride, 1)
            better = win > out  # strict: ties keep the first position seen
            out = np.where(better, win, out)
            arg = np.where(better, i * window + j, arg)

    def bw_max(g):
        gxp = np.zeros_like(xp)
        for i in range(window):
            for j in range(window):
                _window(gxp, i, j, ho, wo, stride, 1)[...] += np.where(arg == i * window + j, g, 0.0)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), bw_max)


def channel_pool(kind: str, x: Tensor) -> Tensor:
    """Reduce over the channel axis to a ``[N, 1, H, W]`` plane."""
    if kind not in ("max", "mean"):
        raise ContractError(f"unknown channel pool '{kind}'")
    return T.reduce(kind, x, 1, keepdims=True)


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------

def activation(kind: str, x: Tensor) -> Tensor:
    if kind not in ("sigmoid", "silu", "relu", "hardswish", "hardsigmoid", "identity"):
        raise ContractError(f"unknown activation '{kind}'")
    return x if kind == "identity" else T.elementwise(kind, x)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like most frameworks).
    """
    n, c, h, w = x.shape
    if c != gamma.shape[0]:
        raise ShapeError(f"batch_norm got {c} channels, state has {gamma.shape[0]}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if not training:
        scale = gd / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        shift = beta.data.reshape(1, c, 1, 1) - running_mean.reshape(1, c, 1, 1) * scale
        out = xd * scale.astype(xd.dtype) + shift.astype(xd.dtype)
        mu, sd = running_mean.copy(), np.sqrt(running_var + eps)

        def bw_eval(g):
            xhat = (xd - mu.reshape(1, c, 1, 1)) / sd.reshape(1, c, 1, 1)
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ContractError("batch_norm in train mode needs N*H*W >= 2")
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(1, c, 1, 1)
    var = np.einsum("nchw,nchw->c", centered, centered) / m
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * m / (m - 1)

    def bw(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gx = None
        if x.requires_grad:
            k = (gd.reshape(c) * invstd / m).reshape(1, c, 1, 1)
            gx = k * (m * g - gb.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw)


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each spatial position over its channels (axis 1)."""
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"layer_norm got {c} channels, parameters have {gamma.shape}")
    xd = x.data
    shape = (1, c) + (1,) * (x.ndim - 2)
    mean = xd.mean(axis=1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    gd = gamma.data.reshape(shape)
    out = xhat * gd + beta.data.reshape(shape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = invstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_matrix(size: int, scale: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix ``[size*scale, size]`` with half-pixel centres."""
    out = size * scale
    src = (np.arange(out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    m = np.zeros((out, size), dtype=dtype)
    rows = np.arange(out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    if int(scale) != scale or scale < 1:
        raise ContractError(f"upsample scale must be an integer >= 1, got {scale}")
    scale = int(scale)
    if scale == 1:
        return x
    n, c, h, w = x.shape
    mh = bilinear_matrix(h, scale, x.dtype)
    mw = bilinear_matrix(w, scale, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))
