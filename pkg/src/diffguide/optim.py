"""AdamW with decoupled weight decay."""

from __future__ import annotations

import logging

import numpy as np

from .nn.module import Parameter

log = logging.getLogger(__name__)


class AdamW:
    """Decay ``theta <- theta * (1 - lr * wd)`` first, then a bias-corrected Adam step.

    A step whose gradients contain NaN/inf is skipped entirely and counted in
    ``skipped_steps``.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-4, weight_decay: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state: dict = {}

    @property
    def skipped_steps(self) -> int:
        return self.state.get("skipped", 0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False if it was skipped."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        ok = adamw_step([p.data for p in self.params], grads, self.state, self.lr, self.weight_decay,
                        *self.betas, self.eps)
        if not ok:
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped_steps)
        return ok


def adamw_step(params, grads, state: dict, lr: float = 1e-4, wd: float = 5e-4,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place update of the arrays in ``params``.

    ``state`` starts empty and accumulates ``m``, ``v``, ``t`` and ``skipped``.
    """
    if not all(np.isfinite(g).all() for g in grads):
        state["skipped"] = state.get("skipped", 0) + 1
        return False
    state.setdefault("m", [np.zeros_like(p) for p in params])
    state.setdefault("v", [np.zeros_like(p) for p in params])
    state["t"] = t = state.get("t", 0) + 1
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        p *= 1.0 - lr * wd
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        p -= lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)
    return True
