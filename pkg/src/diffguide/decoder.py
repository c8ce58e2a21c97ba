"""Difference-aware decoder.

Each level weights the pre/post features by their absolute difference, fuses
the pair with a 1x1 reduction and a VSS block, then mixes the result with the
projected difference through a sigmoid attention map. Levels are summed
deep-to-shallow and a 1x1 head produces two-class logits at input size.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .errors import ShapeError
from .nn import functional as F
from .nn.layers import Conv2d
from .nn.module import Module, ModuleList
from .tensor import Tensor
from .vssm import VSSBlock


def refined_diff(f_pre: Tensor, f_post: Tensor) -> Tensor:
    if f_pre.shape != f_post.shape:
        raise ShapeError(f"refined_diff operands differ: {f_pre.shape} vs {f_post.shape}")
    return T.absolute(T.sub(f_pre, f_post))


def diff_weighting(f: Tensor, f_diff_hat: Tensor) -> Tensor:
    """``f + f * f_diff_hat``: emphasise where the two dates disagree."""
    if f.shape != f_diff_hat.shape:
        raise ShapeError(f"diff_weighting operands differ: {f.shape} vs {f_diff_hat.shape}")
    return f + f * f_diff_hat


def attention_mix(attn: Tensor, p_prime: Tensor, diff_proj: Tensor) -> Tensor:
    """``attn * P' + (1 - attn) * diff_proj + P'`` with ``attn`` broadcast over channels."""
    if p_prime.shape != diff_proj.shape:
        raise ShapeError(f"fused features {p_prime.shape} and projected difference {diff_proj.shape} differ")
    return attn * p_prime + (1.0 - attn) * diff_proj + p_prime


class DecoderLevel(Module):
    """One decoder level. With ``dynamic=False`` it reduces to ``P = P'`` on the raw pair."""

    def __init__(self, in_ch: int, c_dec: int, state_dim: int = 8, expand: int = 2,
                 dynamic: bool = True, dtype=np.float32):
        super().__init__()
        self.in_ch, self.c_dec, self.dynamic = in_ch, c_dec, dynamic
        self.reduce = Conv2d.make(2 * in_ch, c_dec, 1, bias=True, dtype=dtype)
        self.vss = VSSBlock(c_dec, state_dim, expand, dtype=dtype)
        if dynamic:
            # bias-free so a zero difference gives a spatially constant attention map
            self.diff_proj = Conv2d.make(in_ch, c_dec, 1, bias=False, dtype=dtype)
            self.attn = Conv2d.make(c_dec, 1, 3, bias=True, dtype=dtype)

    def fuse_vss(self, w_pre: Tensor, w_post: Tensor) -> Tensor:
        if w_pre.shape != w_post.shape:
            raise ShapeError(f"pre/post features differ: {w_pre.shape} vs {w_post.shape}")
        return self.vss(self.reduce(T.concat([w_pre, w_post], axis=1)))

    def attention(self, diff_proj: Tensor) -> Tensor:
        return F.activation("sigmoid", self.attn(diff_proj))

    def dynamic_fuse(self, p_prime: Tensor, diff_proj: Tensor) -> Tensor:
        return attention_mix(self.attention(diff_proj), p_prime, diff_proj)

    def forward(self, f_pre: Tensor, f_post: Tensor) -> Tensor:
        if not self.dynamic:
            return self.fuse_vss(f_pre, f_post)
        d = refined_diff(f_pre, f_post)
        p_prime = self.fuse_vss(diff_weighting(f_pre, d), diff_weighting(f_post, d))
        return self.dynamic_fuse(p_prime, self.diff_proj(d))


class ChangeDecoder(Module):
    def __init__(self, channels: tuple[int, ...], c_dec: int = 64, state_dim: int = 8, expand: int = 2,
                 dynamic: bool = True, num_classes: int = 2, dtype=np.float32):
        super().__init__()
        if len(channels) != 4:
            raise ShapeError(f"decoder needs four encoder levels, got channels {channels}")
        self.levels = ModuleList(DecoderLevel(c, c_dec, state_dim, expand, dynamic, dtype=dtype) for c in channels)
        self.head = Conv2d.make(c_dec, num_classes, 1, bias=True, dtype=dtype)

    def forward(self, enc: EncoderOutput) -> Tensor:
        if len(enc.pre) != 4 or len(enc.post) != 4:
            raise ShapeError("decoder needs a four-level pyramid for each date")
        c = None
        for j in (3, 2, 1, 0):
            p = self.levels[j](enc.pre[j], enc.post[j])
            if c is not None:
                up = F.upsample_bilinear(c, 2)
                if up.shape != p.shape:
                    raise ShapeError(f"level {j + 1} output {p.shape} does not match upsampled deeper level {up.shape}")
                p = p + up
            c = p
        return F.upsample_bilinear(self.head(c), 4)
