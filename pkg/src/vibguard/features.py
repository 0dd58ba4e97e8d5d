"""Differentiable spectral front-ends built from fixed matrices."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import dsp
from .errors import InvalidInputError
from .nn import Tensor, functional as F


@lru_cache(maxsize=32)
def dft_matrix(size: int, window: bool = True) -> np.ndarray:
    """Rows: cos then sin of the one-sided real DFT, shape [2 * (size//2 + 1), size]."""
    n = np.arange(size)
    k = np.arange(size // 2 + 1)[:, None]
    ang = 2 * np.pi * k * n / size
    w = dsp.hann(size) if window else np.ones(size)
    m = np.concatenate([np.cos(ang) * w, -np.sin(ang) * w])
    m.setflags(write=False)
    return m


def stft_magnitude(x: Tensor, fft_size: int, hop: int, eps: float = 1e-7) -> Tensor:
    """|STFT| of x [B, n] with a Hann window and no padding: [B, frames, fft_size/2 + 1]."""
    frames = F.frame(x, fft_size, hop)
    spec = F.apply_matrix(frames, dft_matrix(fft_size))
    nb = fft_size // 2 + 1
    re, im = spec[..., :nb], spec[..., nb:]
    return (re * re + im * im + eps * eps).sqrt()


@lru_cache(maxsize=32)
def _mel_dft(fft_size: int, sample_rate: int, n_mels: int) -> np.ndarray:
    fb = dsp.mel_filterbank(n_mels, fft_size, sample_rate)
    fb = np.array(fb)
    fb.setflags(write=False)
    return fb


def log_mel(x: Tensor, sample_rate: int, fft_size: int, hop: int, n_mels: int, floor: float = 1e-8) -> Tensor:
    """Natural-log mel power, [B, frames, n_mels]."""
    frames = F.frame(x, fft_size, hop)
    spec = F.apply_matrix(frames, dft_matrix(fft_size))
    nb = fft_size // 2 + 1
    re, im = spec[..., :nb], spec[..., nb:]
    power = re * re + im * im
    mel = F.apply_matrix(power, _mel_dft(fft_size, sample_rate, n_mels))
    return (mel + floor).log()


def normalized_log_mel(x: Tensor, sample_rate: int, fft_size: int, hop: int, n_mels: int) -> Tensor:
    """Log-mel with the utterance mean removed, so overall gain does not matter. [B, n_mels, frames]."""
    lm = log_mel(x, sample_rate, fft_size, hop, n_mels)
    lm = lm - lm.mean(axis=(1, 2), keepdims=True)
    return lm.transpose(0, 2, 1)


@lru_cache(maxsize=16)
def resample_matrix(n: int, source_rate: int, target_rate: int) -> sparse.csr_matrix:
    """Sparse matrix equal to `dsp.resample` on length-n signals."""
    if source_rate == target_rate:
        return sparse.identity(n, format="csr")
    g = math.gcd(source_rate, target_rate)
    up, down = target_rate // g, source_rate // g
    # Same indexing as scipy's resample_poly: upfirdn with a zero-padded, gain-scaled filter.
    h = dsp._resample_filter(up, down) * up
    half_len = (len(h) - 1) // 2
    pre_pad = down - half_len % down
    pre_remove = (half_len + pre_pad) // down
    hp = np.concatenate([np.zeros(pre_pad), h])
    n_out = -(-n * up // down)
    m = np.arange(n_out)[:, None]
    base = (m + pre_remove) * down
    k = base // up - np.arange(-(-len(hp) // up) + 1)[None, :]
    idx = base - k * up
    ok = (k >= 0) & (k < n) & (idx >= 0) & (idx < len(hp))
    rows = np.broadcast_to(m, k.shape)[ok]
    vals = hp[idx[ok]]
    return sparse.csr_matrix((vals, (rows, k[ok])), shape=(n_out, n))


def resample_tensor(x: Tensor, source_rate: int, target_rate: int) -> Tensor:
    """Differentiable resampling along the last axis (fixed polyphase windowed-sinc)."""
    if source_rate == target_rate:
        return x
    if source_rate <= 0 or target_rate <= 0:
        raise InvalidInputError("rates must be positive")
    return F.apply_matrix(x, resample_matrix(x.shape[-1], source_rate, target_rate))
