"""Minimal module tree: parameters, buffers, train/eval mode, seeded init."""

from __future__ import annotations

import zlib
from typing import Callable, Iterator

import numpy as np

from ..tensor import Tensor

InitFn = Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]


class Parameter(Tensor):
    """Learnable leaf tensor carrying its own initialisation rule.

    ``init`` is ``"kaiming"`` (uniform in ``+-1/sqrt(fan_in)``, the usual
    conv/linear default), ``"zeros"``, ``"ones"`` or a callable
    ``(rng, shape) -> array``.
    """

    __slots__ = ("init", "fan_in")

    def __init__(self, shape, init: str | InitFn = "kaiming", fan_in: int | None = None, dtype=np.float32):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init
        self.fan_in = fan_in

    def reset(self, rng: np.random.Generator) -> None:
        shape = self.shape
        if callable(self.init):
            values = self.init(rng, shape)
        elif self.init == "zeros":
            values = np.zeros(shape)
        elif self.init == "ones":
            values = np.ones(shape)
        elif self.init == "kaiming":
            fan_in = self.fan_in or int(np.prod(shape[1:])) or 1
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init '{self.init}'")
        self.data = np.asarray(values, dtype=self.data.dtype).reshape(shape).copy()
        self.grad = None


class Module:
    """Base class; children and parameters are discovered from attributes."""

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- tree walking --------------------------------------------------
    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), buf
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- state ---------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for k, buf in m._buffers.items():
                m._buffers[k] = buf.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for prefix, m in self.named_modules():
            for k in m._buffers:
                key = f"{prefix}.{k}" if prefix else k
                m._buffers[k][...] = state[key]


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def named_parameters(self, prefix: str = ""):
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)


def init_parameters(module: Module, seed: int) -> None:
    """Initialise every parameter from a stream keyed by (seed, parameter path).

    Keying on the path keeps shared sub-networks identical across model
    variants that add or drop other parts of the tree.
    """
    for name, p in module.named_parameters():
        rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
        p.reset(rng)
