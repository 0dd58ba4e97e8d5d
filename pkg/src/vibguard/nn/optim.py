"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, state: AdamState | None = None):
    """One Adam update. Returns (new_params, state); a None gradient counts as zero."""
    if len(params) != len(grads):
        raise InvalidInputError("params and grads differ in length")
    state = state or AdamState()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise InvalidInputError(f"grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out, state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.lr, self.betas[0], self.betas[1], self.eps, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.state.step, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_dict(self, d: dict[str, np.ndarray]):
        self.state = AdamState(int(d["step"]))
        n = len(self.params)
        if "m.0" in d:
            self.state.m = [np.array(d[f"m.{i}"]) for i in range(n)]
            self.state.v = [np.array(d[f"v.{i}"]) for i in range(n)]
