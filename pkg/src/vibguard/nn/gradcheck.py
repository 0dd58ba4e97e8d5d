"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # name -> max relative error
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        rows = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        return f"grad check {'pass' if self.passed else 'FAIL'} (tol {self.tol:g})\n" + "\n".join(rows)


def grad_check(fn, tensors: dict[str, Tensor], tol: float = 1e-3, h: float = 1e-4, n_dirs: int = 3,
               seed: int = 0, atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic and central-difference directional derivatives.

    `fn()` must rebuild the graph from the current `tensors` and return a
    Tensor; it is reduced to a scalar by a fixed random projection. Each
    tensor is probed along `n_dirs` random unit directions.
    """
    rng = np.random.default_rng(seed)
    probe = None

    def scalar():
        nonlocal probe
        out = fn()
        if probe is None:
            probe = Tensor(rng.standard_normal(out.shape))
        return (out * probe).sum()

    for t in tensors.values():
        t.grad = None
    loss = scalar()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}

    errors = {}
    for name, t in tensors.items():
        worst = 0.0
        base = t.data.copy()
        for _ in range(n_dirs):
            d = rng.standard_normal(t.shape)
            d /= np.linalg.norm(d) or 1.0
            t.data = base + h * d
            up = scalar().item()
            t.data = base - h * d
            down = scalar().item()
            t.data = base
            num = (up - down) / (2 * h)
            ana = float(np.sum(analytic[name] * d))
            scale = max(abs(num), abs(ana))
            err = 0.0 if scale < atol else abs(num - ana) / scale
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tol)


def module_grad_check(module, inputs: list[Tensor], tol: float = 1e-3, **kw) -> GradCheckReport:
    """Check every parameter of `module` and every input that requires grad."""
    tensors = dict(module.named_parameters())
    for i, x in enumerate(inputs):
        if x.requires_grad:
            tensors[f"input{i}"] = x
    return grad_check(lambda: module(*inputs), tensors, tol=tol, **kw)
