"""Differentiable operators built on `Tensor.from_op`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal, sparse

from .. import dsp
from ..errors import InvalidInputError
from .tensor import Tensor, _lift


def _conv_out_len(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation over the last axis. x: [N, Cin, L], w: [Cout, Cin, K]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise InvalidInputError(f"conv1d shapes incompatible: x{x.shape} w{w.shape}")
    N, Cin, L = x.shape
    Cout, _, K = w.shape
    span = dilation * (K - 1) + 1
    Lout = _conv_out_len(L, K, stride, padding, dilation)
    if Lout < 1:
        raise InvalidInputError("conv1d input too short for kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # im2col as [N, Cin*K, Lout] so both products below are plain batched matmuls
    cols = sliding_window_view(xp, span, axis=2)[:, :, : (Lout - 1) * stride + 1 : stride, ::dilation]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(N, Cin * K, Lout)
    W2 = w.data.reshape(Cout, Cin * K)
    y = W2 @ cols
    if b is not None:
        y += b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gw = np.tensordot(g, cols, axes=((0, 2), (0, 2))).reshape(Cout, Cin, K) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (W2.T @ g).reshape(N, Cin, K, Lout)
            gxp = np.zeros((N, Cin, L + 2 * padding))
            stop = (Lout - 1) * stride + 1
            for k in range(K):
                o = k * dilation
                gxp[:, :, o : o + stop : stride] += gc[:, :, k]
            gx = gxp[:, :, padding : padding + L]
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return Tensor.from_op(y, parents, back)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution. x: [N, Cin, L], w: [Cin, Cout, K]; length (L-1)*stride + K - 2*padding."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise InvalidInputError(f"conv_transpose1d shapes incompatible: x{x.shape} w{w.shape}")
    N, Cin, L = x.shape
    _, Cout, K = w.shape
    full = (L - 1) * stride + K
    Lout = full - 2 * padding
    if Lout < 1:
        raise InvalidInputError("conv_transpose1d output would be empty")
    X2 = np.ascontiguousarray(x.data.transpose(0, 2, 1)).reshape(N * L, Cin)
    W2 = w.data.reshape(Cin, Cout * K)
    Y = (X2 @ W2).reshape(N, L, Cout, K)
    out = np.zeros((N, Cout, full))
    stop = (L - 1) * stride + 1
    for k in range(K):
        out[:, :, k : k + stop : stride] += Y[:, :, :, k].transpose(0, 2, 1)
    y = out[:, :, padding : padding + Lout]
    if b is not None:
        y = y + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gf = np.zeros((N, Cout, full))
        gf[:, :, padding : padding + Lout] = g
        G = np.stack([gf[:, :, k : k + stop : stride] for k in range(K)], axis=-1)  # N, Cout, L, K
        G2 = np.ascontiguousarray(G.transpose(0, 2, 1, 3)).reshape(N * L, Cout * K)
        gx = (G2 @ W2.T).reshape(N, L, Cin).transpose(0, 2, 1) if x.requires_grad else None
        gw = (X2.T @ G2).reshape(Cin, Cout, K) if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2)))
        return tuple(res)

    return Tensor.from_op(y, parents, back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b, with w shaped [out, in]."""
    y = x @ w.transpose()
    return y if b is None else y + b


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / (var + eps).sqrt()


def adain(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Instance-normalise x [N, C, L] then apply per-channel scale/shift [N, C]."""
    if scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise InvalidInputError("adain style parameters must be [N, C]")
    return instance_norm(x, eps) * scale.reshape(*scale.shape, 1) + shift.reshape(*shift.shape, 1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    y = a - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), back)


def gaussian_sample(mu: Tensor, sigma: Tensor, seed: int | np.random.Generator) -> Tensor:
    """Reparameterised draw mu + sigma * eps; eps is a constant."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * Tensor(eps)


def frame(x: Tensor, size: int, hop: int) -> Tensor:
    """Overlapping frames of the last axis: [..., L] -> [..., F, size]."""
    L = x.shape[-1]
    if L < size:
        raise InvalidInputError("signal shorter than one frame")
    F = 1 + (L - size) // hop
    y = dsp.frame_signal(x.data, size, hop)

    def back(g):
        gx = np.zeros(x.shape)
        if size % hop == 0:
            for j in range(size // hop):
                blk = g[..., j * hop : (j + 1) * hop]
                gx[..., j * hop : j * hop + F * hop] += blk.reshape(*blk.shape[:-2], F * hop)
        else:
            for f in range(F):
                gx[..., f * hop : f * hop + size] += g[..., f, :]
        return (gx,)

    return Tensor.from_op(y, (x,), back)


def apply_matrix(x: Tensor, m) -> Tensor:
    """Fixed linear map along the last axis: y = x @ m.T for dense or sparse m of shape [out, in]."""
    if x.shape[-1] != m.shape[1]:
        raise InvalidInputError(f"matrix expects {m.shape[1]} inputs, got {x.shape[-1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, m.shape[1])
    if sparse.issparse(m):
        y = np.asarray((m @ x2.T).T)
        back_m = m.T.tocsr()

        def back(g):
            return (np.asarray((back_m @ g.reshape(-1, m.shape[0]).T).T).reshape(x.shape),)

    else:
        y = x2 @ m.T

        def back(g):
            return ((g.reshape(-1, m.shape[0]) @ m).reshape(x.shape),)

    return Tensor.from_op(y.reshape(*lead, m.shape[0]), (x,), back)


def sosfilt(x: Tensor, sos: np.ndarray) -> Tensor:
    """Causal IIR filtering along the last axis with fixed second-order sections."""
    y = signal.sosfilt(sos, x.data, axis=-1)

    def back(g):
        return (signal.sosfilt(sos, g[..., ::-1], axis=-1)[..., ::-1],)

    return Tensor.from_op(y, (x,), back)


def sosfiltfilt_zero_state(x: Tensor, sos: np.ndarray) -> Tensor:
    """Forward then backward pass of `sosfilt` (zero phase, squared magnitude)."""
    y = sosfilt(x, sos)
    return sosfilt(y[..., ::-1], sos)[..., ::-1]


def tv_fir(x: Tensor, taps: Tensor, hop: int) -> Tensor:
    """Time-varying FIR: x [B, n], taps [B, F, T] -> [B, n]."""
    if x.ndim != 2 or taps.ndim != 3 or taps.shape[0] != x.shape[0]:
        raise InvalidInputError("tv_fir expects x [B, n] and taps [B, F, T]")
    y = dsp.tv_fir_forward(x.data, taps.data, hop)

    def back(g):
        return dsp.tv_fir_backward(x.data, taps.data, hop, g)

    return Tensor.from_op(y, (x, taps), back)


def l1(a: Tensor, b) -> Tensor:
    return (a - b).abs().mean()


def clamped_log(p: Tensor, floor: float = 1e-7) -> Tensor:
    return p.clip(floor, 1.0).log()


def lift(x) -> Tensor:
    return _lift(x)
