"""Parameter, FLOP and peak-memory accounting for a model configuration."""

from __future__ import annotations

import gc
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .model import ChangeNet, build_model

# Published cost of the reference model at 1x3x256x256, for side-by-side display only.
PUBLISHED_REFERENCE = {"params": 3.43e6, "flops": 1.12e9, "memory_mb": 513.0}

SWEEP_SIZES = (256, 384, 512, 768, 1024)


@dataclass(frozen=True)
class CostReport:
    input_shape: tuple[int, ...]
    params: int
    flops: int  # 2 x multiply-accumulates of convs, linears and scans
    peak_bytes: int  # high-water mark of array allocations during one inference forward

    def format(self) -> str:
        return (f"input {'x'.join(map(str, self.input_shape))}: params {self.params / 1e6:.3f}M, "
                f"FLOPs {self.flops / 1e9:.3f}G, peak {self.peak_bytes / 2**20:.1f}MB")


def count_params(model: ChangeNet) -> int:
    return sum(p.size for p in model.parameters())


def _inputs(shape, dtype):
    rng = np.random.default_rng(0)
    return rng.random(shape).astype(dtype), rng.random(shape).astype(dtype)


def measure_flops(model: ChangeNet, input_shape) -> int:
    pre, post = _inputs(input_shape, model.config.np_dtype)
    with T.no_grad(), T.flop_counter() as box:
        model(pre, post)
    return box[0]


def measure_peak_bytes(model: ChangeNet, input_shape, grad: bool = False) -> int:
    """Allocation high-water mark (above the baseline) over one forward pass."""
    pre, post = _inputs(input_shape, model.config.np_dtype)
    gc.collect()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        if grad:
            out = model(pre, post)
            del out
        else:
            with T.no_grad():
                model(pre, post)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return max(0, peak - base)


def profile(config: ModelConfig, input_shape=(1, 3, 256, 256), model: ChangeNet | None = None) -> CostReport:
    model = model or build_model(config)
    was_training = model.training
    model.eval()
    try:
        flops = measure_flops(model, input_shape)
        peak = measure_peak_bytes(model, input_shape)
    finally:
        model.train(was_training)
    return CostReport(tuple(input_shape), count_params(model), flops, peak)


def sweep(config: ModelConfig, sizes=SWEEP_SIZES, batch: int = 1) -> list[CostReport]:
    model = build_model(config)
    return [profile(config, (batch, 3, s, s), model) for s in sizes]


def check_memory_budget(config: ModelConfig, input_shape, budget_bytes: float) -> int:
    """Estimate training-forward peak for ``input_shape`` and reject it if over budget.

    The estimate runs one graph-recording forward on a single sample and
    scales it by the batch size.
    """
    model = build_model(config)
    single = (1, *input_shape[1:])
    estimate = measure_peak_bytes(model, single, grad=True) * input_shape[0]
    if estimate > budget_bytes:
        raise ContractError(
            f"estimated peak {estimate / 2**20:.0f}MB for input {input_shape} exceeds the "
            f"{budget_bytes / 2**20:.0f}MB budget"
        )
    return estimate


def reference_comparison(report: CostReport) -> str:
    ref = PUBLISHED_REFERENCE
    return "\n".join([
        f"ours          : {report.format()}",
        f"published     : params {ref['params'] / 1e6:.2f}M, FLOPs {ref['flops'] / 1e9:.2f}G, "
        f"memory {ref['memory_mb']:.0f}MB  <- reported by the original authors, not measured here",
        "note: channel widths of the original model are not fully specified, so an exact match is not expected;",
        "      its memory figure is GPU memory, ours is host allocation during one forward.",
    ])
