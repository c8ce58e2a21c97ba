"""Selective state-space scan, its four-direction 2-d form, and the VSS block.

Sequences are channels-first: ``u`` and ``delta`` are ``[B, D, L]``, the
input-dependent ``B``/``C`` matrices are ``[B, N, L]`` and ``A`` is ``[D, N]``.
For every sequence and channel the recurrence is

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,   h_0 = 0
    y_t = <C_t, h_t> + D * u_t

i.e. zero-order hold for ``A`` and an Euler step for ``B``.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ContractError, ShapeError
from .nn import functional as F
from .nn.layers import Conv2d, LayerNorm2d
from .nn.module import Module, Parameter
from .tensor import Tensor, add_flops, make_result, reshape, split, exp, neg, softplus, silu

DIRECTIONS = ("row_fwd", "row_bwd", "col_fwd", "col_bwd")

# elements of the exp(delta*A) block handed to one kernel call
_BLOCK_ELEMS = 1 << 18


@numba.njit(cache=True, fastmath=True)
def _scan_fwd_block(u, delta, decay, bt, ct, dskip, y):
    nd, length = u.shape
    nstate = decay.shape[2]
    zero = u.dtype.type(0)
    h = np.zeros(nstate, dtype=u.dtype)
    for d in range(nd):
        for n in range(nstate):
            h[n] = zero
        for t in range(length):
            x = u[d, t]
            dtx = delta[d, t] * x
            acc = zero
            for n in range(nstate):
                hn = decay[d, t, n] * h[n] + dtx * bt[t, n]
                h[n] = hn
                acc += ct[t, n] * hn
            y[d, t] = acc + dskip[d] * x


@numba.njit(cache=True, fastmath=True)
def _scan_bwd_block(dy, u, delta, decay, a, bt, ct, dskip, du, ddelta, da, dbt, dct, ddskip):
    nd, length = u.shape
    nstate = decay.shape[2]
    zero = u.dtype.type(0)
    hs = np.empty((length + 1, nstate), dtype=u.dtype)
    g = np.zeros(nstate, dtype=u.dtype)
    for d in range(nd):
        # replay the forward states; hs[t + 1] is h_t
        for n in range(nstate):
            hs[0, n] = zero
        for t in range(length):
            dtx = delta[d, t] * u[d, t]
            for n in range(nstate):
                hs[t + 1, n] = decay[d, t, n] * hs[t, n] + dtx * bt[t, n]
        for n in range(nstate):
            g[n] = zero
        dd_acc = zero
        for t in range(length - 1, -1, -1):
            dt = delta[d, t]
            x = u[d, t]
            gy = dy[d, t]
            du_acc = zero
            ddt_acc = zero
            for n in range(nstate):
                gn = g[n] + ct[t, n] * gy
                dct[t, n] += gy * hs[t + 1, n]
                bn = bt[t, n]
                carried = decay[d, t, n] * hs[t, n]
                du_acc += gn * bn
                ddt_acc += gn * (bn * x + a[d, n] * carried)
                da[d, n] += gn * dt * carried
                dbt[t, n] += gn * dt * x
                g[n] = gn * decay[d, t, n]
            du[d, t] = du_acc * dt + dskip[d] * gy
            ddelta[d, t] = ddt_acc
            dd_acc += gy * x
        ddskip[d] += dd_acc


def _channel_blocks(nd: int, length: int, nstate: int):
    step = max(1, _BLOCK_ELEMS // max(1, length * nstate))
    for start in range(0, nd, step):
        yield slice(start, min(nd, start + step))


def scan_forward(u, delta, a, bmat, cmat, dskip) -> np.ndarray:
    """Run the recurrence on raw arrays; returns ``y`` with the shape of ``u``."""
    u = np.ascontiguousarray(u)
    delta = np.ascontiguousarray(delta, dtype=u.dtype)
    a = np.ascontiguousarray(a, dtype=u.dtype)
    bt = np.ascontiguousarray(np.swapaxes(bmat, 1, 2), dtype=u.dtype)
    ct = np.ascontiguousarray(np.swapaxes(cmat, 1, 2), dtype=u.dtype)
    dskip = np.ascontiguousarray(dskip, dtype=u.dtype)
    nb, nd, length = u.shape
    nstate = a.shape[1]
    y = np.empty_like(u)
    for b in range(nb):
        for ds in _channel_blocks(nd, length, nstate):
            decay = np.exp(delta[b, ds, :, None] * a[ds, None, :])
            _scan_fwd_block(u[b, ds], delta[b, ds], decay, bt[b], ct[b], dskip[ds], y[b, ds])
    return y


def scan_backward(dy, u, delta, a, bmat, cmat, dskip):
    """Gradients of ``sum(dy * y)`` w.r.t. (u, delta, A, B, C, D)."""
    u = np.ascontiguousarray(u)
    dt = u.dtype
    dy = np.ascontiguousarray(dy, dtype=dt)
    delta = np.ascontiguousarray(delta, dtype=dt)
    a = np.ascontiguousarray(a, dtype=dt)
    bt = np.ascontiguousarray(np.swapaxes(bmat, 1, 2), dtype=dt)
    ct = np.ascontiguousarray(np.swapaxes(cmat, 1, 2), dtype=dt)
    dskip = np.ascontiguousarray(dskip, dtype=dt)
    nb, nd, length = u.shape
    nstate = a.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(u)
    da = np.zeros_like(a)
    dbt = np.zeros_like(bt)
    dct = np.zeros_like(ct)
    ddskip = np.zeros_like(dskip)
    for b in range(nb):
        for ds in _channel_blocks(nd, length, nstate):
            decay = np.exp(delta[b, ds, :, None] * a[ds, None, :])
            _scan_bwd_block(
                dy[b, ds], u[b, ds], delta[b, ds], decay, a[ds], bt[b], ct[b], dskip[ds],
                du[b, ds], ddelta[b, ds], da[ds], dbt[b], dct[b], ddskip[ds],
            )
    return du, ddelta, da, np.swapaxes(dbt, 1, 2), np.swapaxes(dct, 1, 2), ddskip


def scan_reference(u, delta, a, bmat, cmat, dskip) -> np.ndarray:
    """Step-by-step recurrence, written for clarity rather than speed."""
    u = np.asarray(u, dtype=np.float64)
    nb, nd, length = u.shape
    y = np.zeros_like(u)
    for b in range(nb):
        h = np.zeros(a.shape, dtype=np.float64)  # [D, N]
        for t in range(length):
            step = delta[b, :, t][:, None]
            h = np.exp(step * a) * h + step * bmat[b, :, t][None, :] * u[b, :, t][:, None]
            y[b, :, t] = h @ cmat[b, :, t] + dskip * u[b, :, t]
    return y


def _check_scan_shapes(u, delta, a, bmat, cmat, dskip):
    if u.ndim != 3:
        raise ShapeError(f"scan input must be [B, D, L], got {u.shape}")
    nb, nd, length = u.shape
    nstate = a.shape[-1]
    expect = {
        "delta": (delta.shape, (nb, nd, length)),
        "A": (a.shape, (nd, nstate)),
        "B": (bmat.shape, (nb, nstate, length)),
        "C": (cmat.shape, (nb, nstate, length)),
        "D": (dskip.shape, (nd,)),
    }
    for name, (got, want) in expect.items():
        if tuple(got) != want:
            raise ShapeError(f"scan operand {name} has shape {tuple(got)}, expected {want}")


def selective_scan(u: Tensor, delta: Tensor, a: Tensor, bmat: Tensor, cmat: Tensor, dskip: Tensor) -> Tensor:
    """Differentiable selective scan over ``[B, D, L]`` sequences.

    ``delta`` must be strictly positive; ``a`` is used as given (callers pass
    ``-exp(A_log)`` so the decay stays below one).
    """
    _check_scan_shapes(u, delta, a, bmat, cmat, dskip)
    if not np.all(delta.data > 0):
        raise ContractError("selective scan needs delta > 0 at every step")
    nb, nd, length = u.shape
    add_flops(2 * nb * length * a.shape[1] * nd)
    args = (u.data, delta.data, a.data, bmat.data, cmat.data, dskip.data)
    y = scan_forward(*args)

    def bw(g):
        return scan_backward(g, *args)

    return make_result(y, (u, delta, a, bmat, cmat, dskip), bw)


# ---------------------------------------------------------------------------
# four-direction scan over a 2-d grid
# ---------------------------------------------------------------------------

def scan_orders(h: int, w: int) -> np.ndarray:
    """``[4, H*W]`` flat grid indices visited by each direction, in scan order."""
    row = np.arange(h * w)
    col = row.reshape(h, w).T.ravel()
    return np.stack([row, row[::-1], col, col[::-1]])


def to_sequences(grid: Tensor, per_direction: bool) -> Tensor:
    """Flatten a grid along the four scan orders.

    ``grid`` is ``[N, 4, C, H, W]`` when ``per_direction`` (each direction
    reads its own slice) or ``[N, C, H, W]`` (shared by all directions).
    Returns ``[N, 4, C, H*W]``.
    """
    h, w = grid.shape[-2:]
    orders = scan_orders(h, w)
    inverse = np.argsort(orders, axis=1)
    gd = grid.data.reshape(grid.shape[:-2] + (h * w,))
    if per_direction:
        out = np.stack([gd[:, k][..., orders[k]] for k in range(4)], axis=1)
    else:
        out = np.stack([gd[..., orders[k]] for k in range(4)], axis=1)
    shape = grid.shape

    def bw(g):
        parts = [g[:, k][..., inverse[k]] for k in range(4)]
        back = np.stack(parts, axis=1) if per_direction else sum(parts)
        return (back.reshape(shape),)

    return make_result(out, (grid,), bw)


def merge_sequences(seq: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`to_sequences` followed by a sum over directions."""
    orders = scan_orders(h, w)
    inverse = np.argsort(orders, axis=1)
    sd = seq.data
    out = sum(sd[:, k][..., inverse[k]] for k in range(4))
    out = out.reshape(sd.shape[0], sd.shape[2], h, w)

    def bw(g):
        gf = g.reshape(g.shape[0], g.shape[1], h * w)
        return (np.stack([gf[..., orders[k]] for k in range(4)], axis=1),)

    return make_result(out, (seq,), bw)


def ss2d_scan(x: Tensor, delta: Tensor, a: Tensor, bmat: Tensor, cmat: Tensor, dskip: Tensor) -> Tensor:
    """Scan ``x`` ``[N, D, H, W]`` in the four directions and sum the results.

    ``delta`` is ``[N, 4, D, H, W]`` and ``bmat``/``cmat`` are ``[N, 4, S, H, W]``:
    each direction brings its own input-dependent parameters. ``a`` and
    ``dskip`` are shared.
    """
    n, d, h, w = x.shape
    length = h * w
    xs = reshape(to_sequences(x, per_direction=False), (4 * n, d, length))
    ds = reshape(to_sequences(delta, per_direction=True), (4 * n, d, length))
    bs = reshape(to_sequences(bmat, per_direction=True), (4 * n, bmat.shape[2], length))
    cs = reshape(to_sequences(cmat, per_direction=True), (4 * n, cmat.shape[2], length))
    ys = selective_scan(xs, ds, a, bs, cs, dskip)
    return merge_sequences(reshape(ys, (n, 4, d, length)), h, w)


def _a_log_init(rng, shape):
    d, n = shape
    return np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))


def _dt_bias_init(rng, shape, dt_min=0.01, dt_max=0.1):
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=shape))
    return dt + np.log(-np.expm1(-dt))  # inverse softplus


def _uniform_init(bound):
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


class SS2D(Module):
    """Four-direction selective scan with direction-specific projections."""

    def __init__(self, d_inner: int, state_dim: int = 8, dt_rank: int = 2, dtype=np.float32):
        super().__init__()
        self.d_inner, self.state_dim, self.dt_rank = d_inner, state_dim, dt_rank
        width = dt_rank + 2 * state_dim
        self.x_proj = Parameter((4 * width, d_inner, 1, 1), "kaiming", fan_in=d_inner, dtype=dtype)
        self.dt_weight = Parameter((4 * d_inner, dt_rank, 1, 1), _uniform_init(dt_rank**-0.5), dtype=dtype)
        self.dt_bias = Parameter((4 * d_inner,), _dt_bias_init, dtype=dtype)
        self.a_log = Parameter((d_inner, state_dim), _a_log_init, dtype=dtype)
        self.d_skip = Parameter((d_inner,), "ones", dtype=dtype)

    def projections(self, x: Tensor):
        """Per-direction ``delta [N,4,D,H,W]``, ``B``, ``C`` ``[N,4,S,H,W]``."""
        n, d, h, w = x.shape
        r, s = self.dt_rank, self.state_dim
        dbl = reshape(F.conv2d(x, self.x_proj), (n, 4, r + 2 * s, h, w))
        dt, bmat, cmat = split(dbl, [r, s, s], axis=2)
        dt = F.conv2d(reshape(dt, (n, 4 * r, h, w)), self.dt_weight, self.dt_bias, groups=4)
        delta = reshape(softplus(dt), (n, 4, d, h, w))
        return delta, bmat, cmat

    def decay_rates(self) -> Tensor:
        return neg(exp(self.a_log))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d_inner:
            raise ShapeError(f"SS2D expects {self.d_inner} channels, got {x.shape}")
        delta, bmat, cmat = self.projections(x)
        return ss2d_scan(x, delta, self.decay_rates(), bmat, cmat, self.d_skip)


class VSSBlock(Module):
    """``x + out_proj(SS2D(silu(dwconv(in_a))) * silu(in_b))`` over LN(x)."""

    def __init__(self, channels: int, state_dim: int = 8, expand: int = 2, dtype=np.float32):
        super().__init__()
        inner = expand * channels
        self.channels, self.inner = channels, inner
        self.norm = LayerNorm2d(channels, dtype=dtype)
        self.in_proj = Conv2d.make(channels, 2 * inner, 1, bias=False, dtype=dtype)
        self.dwconv = Conv2d.make(inner, inner, 3, groups=inner, bias=True, dtype=dtype)
        self.ss2d = SS2D(inner, state_dim, max(1, math.ceil(channels / 16)), dtype=dtype)
        self.out_proj = Conv2d.make(inner, channels, 1, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"VSS block of width {self.channels} got input {x.shape}")
        a, b = split(self.in_proj(self.norm(x)), [self.inner, self.inner], axis=1)
        a = silu(self.dwconv(a))
        y = self.ss2d(a) * silu(b)
        return x + self.out_proj(y)
