"""Difference-guided dual encoder.

An independent three-layer branch encodes the absolute difference image. At
each of the first three layers its features pass through a difference
adapter and spatial/channel attention, and the result modulates the shared
(Siamese) encoder of the raw pre/post images. Layer four runs unmodulated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .errors import ShapeError
from .nn import functional as F
from .nn.layers import Conv2d, ConvNormAct, Linear
from .nn.module import Module, ModuleList, Parameter
from .tensor import Tensor


def abs_diff_image(pre: Tensor, post: Tensor) -> Tensor:
    if pre.shape != post.shape:
        raise ShapeError(f"pre/post images differ in shape: {pre.shape} vs {post.shape}")
    return T.absolute(T.sub(pre, post))


def dgm_fuse(f_ori: Tensor, f_sca: Tensor) -> Tensor:
    """Residual multiplicative modulation ``f_ori + f_ori * f_sca``."""
    if f_ori.shape != f_sca.shape:
        raise ShapeError(f"dgm_fuse operands differ: {f_ori.shape} vs {f_sca.shape}")
    return f_ori + f_ori * f_sca


class DifferenceAdapter(Module):
    """Residual depthwise-separable dilated conv stack.

    ``out = skip(x) + pw(silu(bn(dw_dil2(silu(bn(align(x)))))))``; ``skip`` is
    the identity unless the channel counts differ.
    """

    def __init__(self, in_ch: int, out_ch: int, dtype=np.float32):
        super().__init__()
        self.align = ConvNormAct(in_ch, out_ch, 1, act="silu", dtype=dtype)
        self.dw = ConvNormAct(out_ch, out_ch, 3, dilation=2, groups=out_ch, act="silu", dtype=dtype)
        self.pw = Conv2d.make(out_ch, out_ch, 1, bias=True, dtype=dtype)
        self.skip = Conv2d.make(in_ch, out_ch, 1, bias=False, dtype=dtype) if in_ch != out_ch else None

    def forward(self, x: Tensor) -> Tensor:
        g = self.pw(self.dw(self.align(x)))
        return (self.skip(x) if self.skip is not None else x) + g


class SpatialChannelAttention(Module):
    """``alpha * A_spatial * A_channel * x`` with a learnable scalar ``alpha``."""

    def __init__(self, channels: int, reduction: int = 4, gate: str = "silu", dtype=np.float32):
        super().__init__()
        hidden = max(8, channels // reduction)
        self.spatial = Conv2d.make(2, 1, 3, bias=True, dtype=dtype)
        self.fc1 = Linear(channels, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, channels, dtype=dtype)
        self.gate = gate
        self.alpha = Parameter((1,), "zeros", dtype=dtype)

    def spatial_map(self, x: Tensor) -> Tensor:
        stats = T.concat([F.channel_pool("max", x), F.channel_pool("mean", x)], axis=1)
        return F.activation("sigmoid", self.spatial(stats))

    def channel_vector(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        v = T.reshape(F.pool("global_avg", x), (n, c))
        v = F.activation(self.gate, self.fc2(F.activation("silu", self.fc1(v))))
        return T.reshape(v, (n, c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return self.alpha * self.spatial_map(x) * self.channel_vector(x) * x


class DGM(Module):
    def __init__(self, diff_ch: int, ori_ch: int, reduction: int = 4, gate: str = "silu", dtype=np.float32):
        super().__init__()
        self.da = DifferenceAdapter(diff_ch, ori_ch, dtype=dtype)
        self.sca = SpatialChannelAttention(ori_ch, reduction, gate, dtype=dtype)

    def forward(self, f_diff: Tensor) -> Tensor:
        """The modulation signal ``F_SCA`` for this layer."""
        return self.sca(self.da(f_diff))


@dataclass
class EncoderOutput:
    pre: list[Tensor]  # levels 1-3 modulated, level 4 raw
    post: list[Tensor]
    diff: list[Tensor]  # difference-branch pyramid (empty without DGM)
    sca: list[Tensor]


class DifferenceGuidedEncoder(Module):
    """Siamese raw-image encoder, optionally guided by a difference branch.

    Pre and post images travel through the shared branch as one stacked batch,
    so a single pass serves both streams.
    """

    def __init__(self, config: BackboneConfig, use_dgm: bool = True, reduction: int = 4,
                 gate: str = "silu", dtype=np.float32):
        super().__init__()
        self.use_dgm = use_dgm
        self.original = Backbone(config, 4, dtype=dtype)
        if use_dgm:
            self.difference = Backbone(config, 3, dtype=dtype)
            chans = config.channels
            self.dgm = ModuleList(DGM(chans[j], chans[j], reduction, gate, dtype=dtype) for j in range(3))

    def forward(self, pre: Tensor, post: Tensor) -> EncoderOutput:
        if pre.shape != post.shape or pre.ndim != 4 or pre.shape[1] != 3:
            raise ShapeError(f"encoder needs two [N,3,H,W] images of equal shape, got {pre.shape} and {post.shape}")
        n = pre.shape[0]
        x = T.concat([pre, post], axis=0)
        d = abs_diff_image(pre, post) if self.use_dgm else None
        diffs, scas, levels = [], [], []
        for j in range(1, 5):
            x = self.original.forward_layer(j, x)
            if self.use_dgm and j <= 3:
                d = self.difference.forward_layer(j, d)
                f_sca = self.dgm[j - 1](d)
                x = dgm_fuse(x, T.concat([f_sca, f_sca], axis=0))
                diffs.append(d)
                scas.append(f_sca)
            levels.append(x)
        pre_levels = [T.getitem(f, slice(0, n)) for f in levels]
        post_levels = [T.getitem(f, slice(n, 2 * n)) for f in levels]
        return EncoderOutput(pre_levels, post_levels, diffs, scas)
