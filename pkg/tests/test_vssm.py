import numpy as np
import pytest

from diffguide import tensor as T
from diffguide.errors import ContractError, ShapeError
from diffguide.nn.module import init_parameters
from diffguide.tensor import Tensor
from diffguide.vssm import (
    SS2D,
    VSSBlock,
    merge_sequences,
    scan_forward,
    scan_orders,
    scan_reference,
    selective_scan,
    ss2d_scan,
    to_sequences,
)

from conftest import check_directional, check_op_grad


def random_scan_args(rng, nb=2, nd=3, length=7, nstate=4, dtype=np.float64):
    return (
        rng.standard_normal((nb, nd, length)).astype(dtype),
        rng.uniform(0.01, 0.5, size=(nb, nd, length)).astype(dtype),
        -rng.uniform(0.5, 4.0, size=(nd, nstate)).astype(dtype),
        rng.standard_normal((nb, nstate, length)).astype(dtype),
        rng.standard_normal((nb, nstate, length)).astype(dtype),
        rng.standard_normal(nd).astype(dtype),
    )


def test_scan_matches_reference_small(rng):
    for _ in range(20):
        args = random_scan_args(rng, nb=2, nd=int(rng.integers(1, 6)), length=int(rng.integers(1, 40)),
                                nstate=int(rng.integers(1, 9)))
        np.testing.assert_allclose(scan_forward(*args), scan_reference(*args), rtol=0, atol=1e-12)


def test_scan_single_step_closed_form(rng):
    u, delta, a, b, c, d = random_scan_args(rng, nb=1, nd=2, length=1, nstate=3)
    expect = (delta[0, :, 0][:, None] * b[0, :, 0][None, :] * u[0, :, 0][:, None]) @ c[0, :, 0] + d * u[0, :, 0]
    np.testing.assert_allclose(scan_forward(u, delta, a, b, c, d)[0, :, 0], expect, rtol=1e-12)


def test_scan_zero_input_gives_zero_output(rng):
    args = list(random_scan_args(rng))
    args[0] = np.zeros_like(args[0])
    assert np.all(scan_forward(*args) == 0)


def test_scan_float32_close_to_float64(rng):
    args64 = random_scan_args(rng, nd=4, length=64, nstate=8)
    args32 = [x.astype(np.float32) for x in args64]
    np.testing.assert_allclose(scan_forward(*args32), scan_reference(*args64), rtol=1e-4, atol=1e-4)


def test_selective_scan_gradients(rng):
    args = random_scan_args(rng, nb=2, nd=3, length=6, nstate=3)
    check_op_grad(selective_scan, *args)


def test_selective_scan_rejects_non_positive_step_and_bad_shapes(rng):
    args = [Tensor(x) for x in random_scan_args(rng)]
    bad = list(args)
    bad[1] = Tensor(-np.abs(args[1].data))
    with pytest.raises(ContractError):
        selective_scan(*bad)
    bad = list(args)
    bad[2] = Tensor(np.zeros((5, 4)))
    with pytest.raises(ShapeError, match="operand A"):
        selective_scan(*bad)


def test_scan_flops():
    args = [Tensor(x) for x in random_scan_args(np.random.default_rng(0), nb=2, nd=3, length=10, nstate=4)]
    with T.flop_counter() as box:
        selective_scan(*args)
    assert box[0] == 2 * 2 * 10 * 4 * 3


def test_scan_orders_are_permutations_and_reversals():
    orders = scan_orders(3, 4)
    for k in range(4):
        assert sorted(orders[k]) == list(range(12))
    np.testing.assert_array_equal(orders[1], orders[0][::-1])
    np.testing.assert_array_equal(orders[3], orders[2][::-1])
    np.testing.assert_array_equal(orders[2][:3], [0, 4, 8])  # column-major walk


def test_sequence_flatten_and_merge_are_adjoint(rng):
    """<to_sequences(x), s> == <x, merge(s)> for the shared-grid flatten."""
    x = rng.standard_normal((2, 3, 4, 5))
    s = rng.standard_normal((2, 4, 3, 20))
    lhs = np.sum(to_sequences(Tensor(x), False).data * s)
    rhs = np.sum(x * merge_sequences(Tensor(s), 4, 5).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    check_op_grad(lambda a: to_sequences(a, False), x)
    check_op_grad(lambda a: to_sequences(a, True), rng.standard_normal((1, 4, 2, 2, 3)))
    check_op_grad(lambda a: merge_sequences(a, 4, 5), s)


def test_ss2d_equals_four_independent_scans(rng):
    n, d, h, w, s = 1, 2, 3, 4, 3
    x = rng.standard_normal((n, d, h, w))
    delta = rng.uniform(0.05, 0.5, size=(n, 4, d, h, w))
    a = -rng.uniform(0.5, 2, size=(d, s))
    b = rng.standard_normal((n, 4, s, h, w))
    c = rng.standard_normal((n, 4, s, h, w))
    dskip = rng.standard_normal(d)
    got = ss2d_scan(Tensor(x), Tensor(delta), Tensor(a), Tensor(b), Tensor(c), Tensor(dskip)).data
    orders = scan_orders(h, w)
    expect = np.zeros((n, d, h * w))
    for k in range(4):
        o = orders[k]
        y = scan_reference(x.reshape(n, d, -1)[..., o], delta[:, k].reshape(n, d, -1)[..., o], a,
                           b[:, k].reshape(n, s, -1)[..., o], c[:, k].reshape(n, s, -1)[..., o], dskip)
        expect[..., o] += y
    np.testing.assert_allclose(got, expect.reshape(n, d, h, w), rtol=1e-11, atol=1e-12)


def test_scan_is_causal(rng):
    """Perturbing step t leaves every output before t unchanged."""
    args = list(random_scan_args(rng, length=12))
    y0 = scan_forward(*args)
    args[0] = args[0].copy()
    args[0][:, :, 8] += 1.0
    y1 = scan_forward(*args)
    np.testing.assert_array_equal(y0[..., :8], y1[..., :8])
    assert not np.allclose(y0[..., 8:], y1[..., 8:])


def test_ss2d_init_values():
    module = SS2D(6, state_dim=4, dt_rank=2, dtype=np.float64)
    init_parameters(module, 3)
    np.testing.assert_allclose(module.a_log.data[2], np.log([1, 2, 3, 4]))
    np.testing.assert_array_equal(module.d_skip.data, 1.0)
    dt = np.log1p(np.exp(module.dt_bias.data))
    assert dt.min() >= 0.01 - 1e-12 and dt.max() <= 0.1 + 1e-12


def test_vss_block_shape_and_gradient(rng):
    block = VSSBlock(4, state_dim=3, expand=2, dtype=np.float64)
    init_parameters(block, 1)
    x = Tensor(rng.standard_normal((2, 4, 3, 5)), requires_grad=True)
    assert block(x).shape == (2, 4, 3, 5)
    probe = rng.standard_normal((2, 4, 3, 5))
    params = block.parameters() + [x]
    check_directional(lambda: T.reduce("sum", block(x) * Tensor(probe)), params, n_dirs=4)


def test_vss_block_rejects_wrong_width():
    block = VSSBlock(4)
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((1, 5, 2, 2), dtype=np.float32)))
