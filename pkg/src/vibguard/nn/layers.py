"""Parameterised layers and the module container."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from ..errors import InvalidInputError, StateError
from . import functional as F
from .tensor import Tensor


class Module:
    """Holds parameters (tensors made by `param`) and child modules as attributes."""

    frozen = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.name == "param":
                    yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise InvalidInputError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise InvalidInputError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        """Stop gradient flow into parameters; `checksum` then guards against drift."""
        for m in self.modules():
            m.frozen = True
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        for m in self.modules():
            m.frozen = False

    def is_frozen(self) -> bool:
        return all(m.frozen for m in self.modules()) and not any(p.requires_grad for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.named_parameters():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True, name="param")


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = math.sqrt(2.0)):
        self.weight = param(kaiming_uniform(rng, (n_out, n_in), n_in, gain))
        self.bias = param(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, gain: float = math.sqrt(2.0), bias: bool = True):
        self.weight = param(kaiming_uniform(rng, (c_out, c_in, kernel), c_in * kernel, gain))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, gain: float = math.sqrt(2.0), bias: bool = True):
        self.weight = param(kaiming_uniform(rng, (c_in, c_out, kernel), c_in * kernel // stride, gain))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm(Module):
    """Instance normalisation with a learnable per-channel affine (ones/zeros init)."""

    def __init__(self, channels: int):
        self.scale = param(np.ones(channels))
        self.shift = param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x) * self.scale.reshape(1, -1, 1) + self.shift.reshape(1, -1, 1)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Lambda(Module):
    """Stateless wrapper so activations can sit inside `Sequential`."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def assert_frozen(module: Module, expected_checksum: str | None = None, what: str = "module"):
    if not module.is_frozen():
        raise StateError(f"{what} must be frozen before use here")
    if expected_checksum is not None and module.checksum() != expected_checksum:
        raise StateError(f"{what} parameters changed while frozen")
