import numpy as np
import pytest

from diffguide.backbone import Backbone, BackboneConfig, InvertedResidual, build_backbone, make_divisible
from diffguide.errors import ContractError, ShapeError
from diffguide.nn.module import init_parameters
from diffguide.tensor import Tensor


@pytest.mark.parametrize("value,expect", [(3, 8), (12, 16), (11.9, 8), (20, 24), (24, 24), (47.5, 48)])
def test_make_divisible(value, expect):
    assert make_divisible(value) == expect


def test_level_strides_and_channels():
    cfg = BackboneConfig()
    net = build_backbone(cfg, 4, seed=0)
    levels = net(Tensor(np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32)))
    assert [f.shape for f in levels] == [
        (2, 16, 16, 16),
        (2, 24, 8, 8),
        (2, 48, 4, 4),
        (2, 96, 2, 2),
    ]


def test_width_multiplier_rounds_to_multiples_of_eight():
    cfg = BackboneConfig(width_multiplier=0.5)
    assert cfg.channels == (8, 16, 24, 48)
    assert cfg.stem == 8


def test_three_layer_variant_is_prefix_of_four_layer():
    cfg = BackboneConfig(width_multiplier=0.5)
    full = Backbone(cfg, 4)
    short = Backbone(cfg, 3)
    init_parameters(full, 5)
    init_parameters(short, 5)
    short_names = dict(short.named_parameters())
    full_names = dict(full.named_parameters())
    assert set(short_names) < set(full_names)
    for name, p in short_names.items():
        np.testing.assert_array_equal(p.data, full_names[name].data)
    x = Tensor(np.random.default_rng(1).random((2, 3, 32, 32), dtype=np.float32))
    full.eval(), short.eval()
    for a, b in zip(short(x), full(x)):
        np.testing.assert_array_equal(a.data, b.data)


def test_forward_layer_checks_channels():
    net = Backbone(BackboneConfig(), 3)
    with pytest.raises(ShapeError, match="layer 2 expects 16"):
        net.forward_layer(2, Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32)))
    with pytest.raises(ContractError):
        net.forward_layer(4, Tensor(np.zeros((1, 48, 4, 4), dtype=np.float32)))


def test_residual_only_when_shapes_match():
    assert InvertedResidual(16, 16, 4, 1, "relu").residual
    assert not InvertedResidual(16, 16, 4, 2, "relu").residual
    assert not InvertedResidual(16, 24, 4, 1, "relu").residual
    assert InvertedResidual(16, 16, 1, 1, "relu").expand is None


def test_config_validation():
    with pytest.raises(ContractError):
        BackboneConfig(stage_strides=(4, 8, 16, 16))
    with pytest.raises(ContractError):
        BackboneConfig(stage_channels=(16, 24, 48))
    with pytest.raises(ContractError):
        Backbone(BackboneConfig(), 2)


def test_squeeze_excite_variant_runs():
    cfg = BackboneConfig(use_se=(False, True, True, True), width_multiplier=0.5)
    net = build_backbone(cfg, 4, seed=0)
    out = net(Tensor(np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)))
    assert out[-1].shape == (1, 48, 2, 2)
    assert all(np.isfinite(f.data).all() for f in out)
