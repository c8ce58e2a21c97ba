"""MobileNetV3-style feature extractor split into four stride-doubling layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import functional as F
from .nn.layers import Conv2d, ConvNormAct
from .nn.module import Module, ModuleList, init_parameters
from .tensor import Tensor


def make_divisible(value: float, divisor: int = 8, minimum: int = 8) -> int:
    """Round to the nearest multiple of ``divisor`` (ties go up), at least ``minimum``."""
    return max(minimum, int(value + divisor / 2) // divisor * divisor)


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 24, 48, 96)
    stage_strides: tuple[int, ...] = (4, 8, 16, 32)
    blocks_per_stage: tuple[int, ...] = (2, 2, 3, 2)
    expand_ratios: tuple[float, ...] = (4.0, 4.0, 4.0, 6.0)
    stage_acts: tuple[str, ...] = ("relu", "relu", "hardswish", "hardswish")
    stem_channels: int = 16
    width_multiplier: float = 1.0
    use_se: tuple[bool, ...] = (False, False, False, False)

    def __post_init__(self):
        for name in ("stage_channels", "stage_strides", "blocks_per_stage", "expand_ratios", "stage_acts", "use_se"):
            if len(getattr(self, name)) != 4:
                raise ContractError(f"BackboneConfig.{name} needs 4 entries")
        s = self.stage_strides
        if s[0] != 4 or any(b != 2 * a for a, b in zip(s, s[1:])):
            raise ContractError(f"stage strides must be 4, 8, 16, 32 (each stage halves once), got {s}")
        if self.width_multiplier <= 0:
            raise ContractError("width_multiplier must be positive")
        if min(self.blocks_per_stage) < 1:
            raise ContractError("every stage needs at least one block")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(make_divisible(c * self.width_multiplier) for c in self.stage_channels)

    @property
    def stem(self) -> int:
        return make_divisible(self.stem_channels * self.width_multiplier)


class SqueezeExcite(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        hidden = make_divisible(channels / 4)
        self.fc1 = Conv2d.make(channels, hidden, 1, dtype=dtype)
        self.fc2 = Conv2d.make(hidden, channels, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = F.pool("global_avg", x)
        s = F.activation("hardsigmoid", self.fc2(F.activation("relu", self.fc1(s))))
        return x * s


class InvertedResidual(Module):
    """Expand (1x1) -> depthwise 3x3 -> optional SE -> project (1x1)."""

    def __init__(self, in_ch, out_ch, expand, stride, act, se=False, dtype=np.float32):
        super().__init__()
        hidden = make_divisible(in_ch * expand)
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.expand = ConvNormAct(in_ch, hidden, 1, act=act, dtype=dtype) if hidden != in_ch else None
        self.depthwise = ConvNormAct(hidden, hidden, 3, stride, groups=hidden, act=act, dtype=dtype)
        self.se = SqueezeExcite(hidden, dtype=dtype) if se else None
        self.project = ConvNormAct(hidden, out_ch, 1, act="identity", dtype=dtype)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        h = self.expand(x) if self.expand is not None else x
        h = self.depthwise(h)
        if self.se is not None:
            h = self.se(h)
        h = self.project(h)
        return x + h if self.residual else h


class Backbone(Module):
    """The first ``num_layers`` stages of the extractor.

    Layer 1 includes the stride-2 stem, so level j sits at stride ``2**(j+1)``.
    """

    def __init__(self, config: BackboneConfig, num_layers: int = 4, dtype=np.float32):
        super().__init__()
        if num_layers not in (3, 4):
            raise ContractError(f"num_layers must be 3 or 4, got {num_layers}")
        self.config = config
        self.num_layers = num_layers
        chans = config.channels
        self.stem = ConvNormAct(3, config.stem, 3, stride=2, act="hardswish", dtype=dtype)
        self.stages = ModuleList()
        prev = config.stem
        for j in range(num_layers):
            blocks = ModuleList()
            for b in range(config.blocks_per_stage[j]):
                blocks.append(
                    InvertedResidual(
                        prev if b == 0 else chans[j],
                        chans[j],
                        config.expand_ratios[j],
                        2 if b == 0 else 1,
                        config.stage_acts[j],
                        config.use_se[j],
                        dtype=dtype,
                    )
                )
            self.stages.append(blocks)
            prev = chans[j]

    @property
    def channels(self) -> tuple[int, ...]:
        return self.config.channels[: self.num_layers]

    def input_channels(self, j: int) -> int:
        return 3 if j == 1 else self.config.channels[j - 2]

    def forward_layer(self, j: int, x: Tensor) -> Tensor:
        if not 1 <= j <= self.num_layers:
            raise ContractError(f"layer index {j} outside 1..{self.num_layers}")
        if x.shape[1] != self.input_channels(j):
            raise ShapeError(f"layer {j} expects {self.input_channels(j)} channels, got input {x.shape}")
        if j == 1:
            x = self.stem(x)
        for block in self.stages[j - 1]:
            x = block(x)
        return x

    def forward(self, x: Tensor) -> list[Tensor]:
        levels = []
        for j in range(1, self.num_layers + 1):
            x = self.forward_layer(j, x)
            levels.append(x)
        return levels


def build_backbone(config: BackboneConfig, num_layers: int, seed: int, dtype=np.float32) -> Backbone:
    net = Backbone(config, num_layers, dtype=dtype)
    init_parameters(net, seed)
    return net
