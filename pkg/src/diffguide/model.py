"""Full change-detection network: guided Siamese encoder plus difference-aware decoder."""

from __future__ import annotations

from .config import ModelConfig
from .decoder import ChangeDecoder
from .encoder import DifferenceGuidedEncoder, EncoderOutput
from .errors import ShapeError
from .nn.module import Module, init_parameters
from .tensor import Tensor, as_tensor


class ChangeNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dtype = config.np_dtype
        bb = config.backbone
        self.encoder = DifferenceGuidedEncoder(bb, config.dgm, config.sca_reduction, config.channel_gate, dtype=dtype)
        self.decoder = ChangeDecoder(bb.channels, config.c_dec, config.state_dim, config.ssm_expand,
                                     dynamic=config.dadf, dtype=dtype)

    def encode(self, pre, post) -> EncoderOutput:
        dtype = self.config.np_dtype
        pre, post = as_tensor(pre, dtype), as_tensor(post, dtype)
        h, w = pre.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input side lengths must be multiples of 32, got {h}x{w}")
        return self.encoder(pre, post)

    def forward(self, pre, post) -> Tensor:
        """Two-class logits ``[N,2,H,W]`` for image batches ``[N,3,H,W]`` in [0,1]."""
        return self.decoder(self.encode(pre, post))


def build_model(config: ModelConfig) -> ChangeNet:
    net = ChangeNet(config)
    init_parameters(net, config.seed)
    return net
