"""Flat model configuration with key=value text (de)serialisation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .errors import ContractError

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 24, 48, 96)
    blocks_per_stage: tuple[int, ...] = (2, 2, 3, 2)
    expand_ratios: tuple[float, ...] = (4.0, 4.0, 4.0, 6.0)
    stage_acts: tuple[str, ...] = ("relu", "relu", "hardswish", "hardswish")
    use_se: tuple[bool, ...] = (False, False, False, False)
    stem_channels: int = 16
    width_multiplier: float = 1.0
    dgm: bool = True
    dadf: bool = True
    state_dim: int = 8
    ssm_expand: int = 2
    c_dec: int = 64
    sca_reduction: int = 4
    channel_gate: str = "silu"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.channel_gate not in ("silu", "sigmoid"):
            raise ContractError(f"channel_gate must be silu or sigmoid, got {self.channel_gate!r}")
        for name in ("state_dim", "ssm_expand", "c_dec", "sca_reduction"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        self.backbone  # validates the backbone fields

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            stage_channels=self.stage_channels,
            blocks_per_stage=self.blocks_per_stage,
            expand_ratios=self.expand_ratios,
            stage_acts=self.stage_acts,
            stem_channels=self.stem_channels,
            width_multiplier=self.width_multiplier,
            use_se=self.use_se,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------
    def to_lines(self) -> list[str]:
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in dataclasses.fields(self)]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ModelConfig | None" = None) -> "ModelConfig":
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ContractError(f"unknown config key {key!r}")
            changes[key] = _parse(raw.strip(), getattr(base, key), key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        return cls.from_pairs(parse_key_values(text), base)

    @classmethod
    def load(cls, path: str | Path, base: "ModelConfig | None" = None) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), base)


def parse_key_values(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_scalar(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            return _BOOL[raw.lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _parse(raw: str, like, key: str):
    if isinstance(like, tuple):
        return tuple(_parse_scalar(part.strip(), like[0], key) for part in raw.split(","))
    return _parse_scalar(raw, like, key)


PRESETS = {
    "default": ModelConfig(),
    # small enough to train on synthetic 128x128 pairs in minutes on one core
    "tiny": ModelConfig(width_multiplier=0.5, state_dim=8, c_dec=32),
    # wider stages sized so cost lands near the published model's budget
    "reference": ModelConfig(
        stage_channels=(24, 40, 80, 160),
        blocks_per_stage=(2, 3, 4, 3),
        expand_ratios=(4.0, 4.0, 4.0, 6.0),
        use_se=(False, True, True, True),
        c_dec=64,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
