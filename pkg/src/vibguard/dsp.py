"""Signal-processing primitives: transforms, filters, resampling, fading, SNR scaling.

Everything here is a pure function of its inputs. Arrays are float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.fft import dct
from scipy.io import wavfile

from .errors import DegenerateInputError, InvalidInputError

DEFAULT_FFT = 1024
DEFAULT_HOP = 256
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio with its sample rate. Samples are nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("audio samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInputError(f"sample rate must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)

    def power(self) -> float:
        return float(np.mean(self.samples ** 2)) if len(self) else 0.0


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [frames, bins]
    frame_hop: int
    fft_size: int
    sample_rate: int
    phase: np.ndarray | None = field(default=None, repr=False)
    length: int | None = None

    def __post_init__(self):
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[1] != self.fft_size // 2 + 1:
            raise InvalidInputError("magnitudes must be [frames, fft_size/2 + 1]")
        if np.any(self.magnitudes < 0):
            raise InvalidInputError("magnitudes must be non-negative")

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_size, 1.0 / self.sample_rate)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (satisfies constant overlap-add at hop n/4)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _check_fft(fft_size: int, hop: int):
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise InvalidInputError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop <= fft_size:
        raise InvalidInputError(f"hop must satisfy 0 < hop <= fft_size, got {hop}")


def frame_signal(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    """Overlapping frames along the last axis, shape [..., frames, size]."""
    n_frames = 1 + (x.shape[-1] - size) // hop
    return sliding_window_view(x, size, axis=-1)[..., : (n_frames - 1) * hop + 1 : hop, :]


def stft(audio: AudioBuffer, fft_size: int = DEFAULT_FFT, hop: int = DEFAULT_HOP) -> Spectrogram:
    """Hann-windowed STFT without edge padding; phase is kept for `istft`."""
    _check_fft(fft_size, hop)
    if len(audio) < fft_size:
        raise InvalidInputError(f"audio has {len(audio)} samples, shorter than one {fft_size}-sample frame")
    frames = frame_signal(audio.samples, fft_size, hop) * hann(fft_size)
    spec = np.fft.rfft(frames, axis=-1)
    return Spectrogram(np.abs(spec), hop, fft_size, audio.sample_rate, np.angle(spec), len(audio))


def istft(spec: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse. Exact wherever the summed squared window is non-zero."""
    if spec.phase is None:
        raise InvalidInputError("spectrogram carries no phase; cannot invert")
    n_fft, hop = spec.fft_size, spec.frame_hop
    frames = np.fft.irfft(spec.magnitudes * np.exp(1j * spec.phase), n=n_fft, axis=-1)
    n_frames = frames.shape[0]
    length = spec.length or (n_frames - 1) * hop + n_fft
    w = hann(n_fft)
    out = np.zeros(max(length, (n_frames - 1) * hop + n_fft))
    norm = np.zeros_like(out)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i] * w
        norm[i * hop : i * hop + n_fft] += w ** 2
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return AudioBuffer(out[:length], spec.sample_rate)


def spectral_energy(spec: Spectrogram) -> float:
    """Time-domain energy implied by the STFT frames (Parseval, Hann with hop = fft/4)."""
    n = spec.fft_size
    power = spec.magnitudes ** 2
    weights = np.full(power.shape[1], 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    frame_energy = (power * weights).sum() / n
    overlap = (hann(n) ** 2).sum() / spec.frame_hop
    return float(frame_energy / overlap)


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=64)
def _resample_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = 48 * max_rate
    return signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", 8.0))


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Windowed-sinc polyphase resampling (Kaiser window, ~80 dB stopband)."""
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise InvalidInputError(f"target rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == audio.sample_rate:
        return audio
    g = math.gcd(audio.sample_rate, target_rate)
    up, down = target_rate // g, audio.sample_rate // g
    y = signal.resample_poly(audio.samples, up, down, window=_resample_filter(up, down))
    return AudioBuffer(y, target_rate)


# ------------------------------------------------------------------- biquads


@dataclass(frozen=True)
class BiquadCoeffs:
    """Second-order section with a0 normalised to one."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def poles(self) -> np.ndarray:
        return np.roots([1.0, self.a1, self.a2])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def sos(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2, 1.0, self.a1, self.a2])

    def response(self, freqs, sample_rate: float) -> np.ndarray:
        z = np.exp(-1j * 2 * np.pi * np.asarray(freqs, dtype=float) / sample_rate)
        return (self.b0 + self.b1 * z + self.b2 * z ** 2) / (1.0 + self.a1 * z + self.a2 * z ** 2)


def design_lowpass_biquad(cutoff: float, sample_rate: float, q: float = 1 / math.sqrt(2)) -> BiquadCoeffs:
    """RBJ cookbook low-pass section."""
    if not 0 < cutoff < sample_rate / 2:
        raise InvalidInputError(f"cutoff {cutoff} Hz must lie in (0, {sample_rate / 2})")
    if q <= 0:
        raise InvalidInputError("q must be positive")
    w0 = 2 * math.pi * cutoff / sample_rate
    alpha = math.sin(w0) / (2 * q)
    cw = math.cos(w0)
    a0 = 1 + alpha
    return BiquadCoeffs(
        b0=(1 - cw) / 2 / a0,
        b1=(1 - cw) / a0,
        b2=(1 - cw) / 2 / a0,
        a1=-2 * cw / a0,
        a2=(1 - alpha) / a0,
    )


def design_shelf_biquad(kind: str, corner: float, sample_rate: float, gain_db: float, slope: float = 1.0) -> BiquadCoeffs:
    """RBJ cookbook shelving section; `kind` is 'low' or 'high'. Gain is reached far from the corner."""
    if kind not in ("low", "high"):
        raise InvalidInputError("kind must be 'low' or 'high'")
    if not 0 < corner < sample_rate / 2:
        raise InvalidInputError(f"corner {corner} Hz must lie in (0, {sample_rate / 2})")
    A = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * corner / sample_rate
    cw = math.cos(w0)
    alpha = math.sin(w0) / 2 * math.sqrt((A + 1 / A) * (1 / slope - 1) + 2)
    sa = 2 * math.sqrt(A) * alpha
    if kind == "low":
        b = (A * ((A + 1) - (A - 1) * cw + sa), 2 * A * ((A - 1) - (A + 1) * cw), A * ((A + 1) - (A - 1) * cw - sa))
        a = ((A + 1) + (A - 1) * cw + sa, -2 * ((A - 1) + (A + 1) * cw), (A + 1) + (A - 1) * cw - sa)
    else:
        b = (A * ((A + 1) + (A - 1) * cw + sa), -2 * A * ((A - 1) + (A + 1) * cw), A * ((A + 1) + (A - 1) * cw - sa))
        a = ((A + 1) - (A - 1) * cw + sa, 2 * ((A - 1) - (A + 1) * cw), (A + 1) - (A - 1) * cw - sa)
    return BiquadCoeffs(b[0] / a[0], b[1] / a[0], b[2] / a[0], a[1] / a[0], a[2] / a[0])


def butterworth_qs(order: int) -> list[float]:
    """Pole-pair quality factors of an even-order Butterworth prototype."""
    if order < 2 or order % 2:
        raise InvalidInputError("order must be a positive even number")
    return [1.0 / (2 * math.cos((2 * k - 1) * math.pi / (2 * order))) for k in range(1, order // 2 + 1)]


def design_lowpass_cascade(cutoff: float, sample_rate: float, sections: int = 4) -> list[BiquadCoeffs]:
    """Low-pass built from `sections` RBJ biquads at one cutoff.

    With several sections the Q values follow a Butterworth prototype, so the
    cascade is maximally flat and sits at -3.01 dB at `cutoff`. `sections=1`
    gives the single q = 1/sqrt(2) biquad.
    """
    if sections < 1:
        raise InvalidInputError("need at least one section")
    qs = butterworth_qs(2 * sections)
    return [design_lowpass_biquad(cutoff, sample_rate, q) for q in qs]


def cascade_response(sections: list[BiquadCoeffs], freqs, sample_rate: float) -> np.ndarray:
    h = np.ones(np.shape(freqs), dtype=complex)
    for s in sections:
        h = h * s.response(freqs, sample_rate)
    return h


def apply_biquads(audio: AudioBuffer, sections: list[BiquadCoeffs]) -> AudioBuffer:
    sos = np.stack([s.sos() for s in sections])
    return audio.with_samples(signal.sosfilt(sos, audio.samples))


# ------------------------------------------------------ time-varying filtering


@dataclass(frozen=True)
class TimeVaryingFir:
    """Per-frame FIR taps; tap index (tap_count - 1) // 2 is the zero-delay tap."""

    taps: np.ndarray  # [frames, tap_count]
    frame_hop: int

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[1] < 1 or taps.shape[0] < 1:
            raise InvalidInputError("taps must be [frames, tap_count] with tap_count >= 1")
        if not np.all(np.isfinite(taps)):
            raise InvalidInputError("taps must be finite")
        if self.frame_hop <= 0:
            raise InvalidInputError("frame_hop must be positive")
        object.__setattr__(self, "taps", taps)

    @property
    def n_frames(self) -> int:
        return self.taps.shape[0]


def crossfade_weights(n: int, n_frames: int, hop: int) -> np.ndarray:
    """Linear partition-of-unity weights, one row per frame, centred mid-frame."""
    t = np.arange(n, dtype=float)
    centers = np.arange(n_frames) * hop + hop / 2.0
    w = np.clip(1.0 - np.abs(t[None, :] - centers[:, None]) / hop, 0.0, None)
    w[0, t < centers[0]] = 1.0
    w[-1, t > centers[-1]] = 1.0
    return w


def _frame_support(w_row: np.ndarray) -> tuple[int, int]:
    nz = np.flatnonzero(w_row)
    if nz.size == 0:
        return 0, 0
    return int(nz[0]), int(nz[-1]) + 1


def tv_fir_forward(x: np.ndarray, taps: np.ndarray, hop: int) -> np.ndarray:
    """Crossfaded per-frame 'same' convolution.

    x: [B, n]; taps: [B, F, T]. Returns [B, n].
    """
    B, n = x.shape
    F, T = taps.shape[1], taps.shape[2]
    c = (T - 1) // 2
    xpad = np.pad(x, ((0, 0), (T - 1 - c, c)))
    w = crossfade_weights(n, F, hop)
    out = np.zeros_like(x)
    flipped = taps[:, :, ::-1]
    for k in range(F):
        lo, hi = _frame_support(w[k])
        if hi <= lo:
            continue
        win = sliding_window_view(xpad[:, lo : hi + T - 1], T, axis=-1)
        out[:, lo:hi] += w[k, lo:hi] * np.einsum("bmt,bt->bm", win, flipped[:, k])
    return out


def tv_fir_backward(x: np.ndarray, taps: np.ndarray, hop: int, grad: np.ndarray):
    """Vector-Jacobian products of `tv_fir_forward` with respect to x and taps."""
    B, n = x.shape
    F, T = taps.shape[1], taps.shape[2]
    c = (T - 1) // 2
    xpad = np.pad(x, ((0, 0), (T - 1 - c, c)))
    w = crossfade_weights(n, F, hop)
    gx = np.zeros_like(xpad)
    gtaps = np.zeros_like(taps)
    flipped = taps[:, :, ::-1]
    for k in range(F):
        lo, hi = _frame_support(w[k])
        if hi <= lo:
            continue
        gk = grad[:, lo:hi] * w[k, lo:hi]
        win = sliding_window_view(xpad[:, lo : hi + T - 1], T, axis=-1)
        gtaps[:, k] = np.einsum("bm,bmt->bt", gk, win)[:, ::-1]
        m = hi - lo
        for i in range(T):
            gx[:, lo + i : lo + i + m] += gk * flipped[:, k, i : i + 1]
    return gx[:, T - 1 - c : T - 1 - c + n], gtaps


def apply_time_varying_fir(audio: AudioBuffer, filt: TimeVaryingFir) -> AudioBuffer:
    """Filter with per-frame taps; frame outputs are linearly crossfaded."""
    if filt.n_frames * filt.frame_hop < len(audio):
        raise InvalidInputError(
            f"{filt.n_frames} frames of hop {filt.frame_hop} do not cover {len(audio)} samples"
        )
    if (filt.n_frames - 1) * filt.frame_hop >= len(audio):
        raise InvalidInputError("filter has frames entirely past the end of the audio")
    y = tv_fir_forward(audio.samples[None, :], filt.taps[None], filt.frame_hop)
    return audio.with_samples(y[0])


# ------------------------------------------------------------------- fading


def crossfade_ramp(fade_len: int) -> np.ndarray:
    """Fade-in gains strictly between 0 and 1."""
    return np.arange(1, fade_len + 1, dtype=float) / (fade_len + 1)


def crossfade_concat(segments: list[AudioBuffer], fade_len: int) -> AudioBuffer:
    """Join segments, overlapping each boundary by `fade_len` samples with a linear crossfade."""
    if not segments:
        raise InvalidInputError("need at least one segment")
    rate = segments[0].sample_rate
    if any(s.sample_rate != rate for s in segments):
        raise InvalidInputError("segments must share one sample rate")
    if len(segments) == 1:
        return segments[0]
    if fade_len < 0 or fade_len >= min(len(s) for s in segments):
        raise InvalidInputError("fade_len must be non-negative and shorter than every segment")
    ramp = crossfade_ramp(fade_len)
    out = segments[0].samples.copy()
    for seg in segments[1:]:
        x = seg.samples
        if fade_len:
            head = out[-fade_len:] * (1 - ramp) + x[:fade_len] * ramp
            out = np.concatenate([out[:-fade_len], head, x[fade_len:]])
        else:
            out = np.concatenate([out, x])
    return AudioBuffer(out, rate)


# ---------------------------------------------------------------------- SNR


def snr_db(reference: AudioBuffer | np.ndarray, noise: AudioBuffer | np.ndarray) -> float:
    r = reference.samples if isinstance(reference, AudioBuffer) else np.asarray(reference)
    p = noise.samples if isinstance(noise, AudioBuffer) else np.asarray(noise)
    pn = np.mean(p ** 2)
    if pn == 0:
        return math.inf
    return float(10 * np.log10(np.mean(r ** 2) / pn))


def snr_gain(perturb_power: float, reference_power: float, rho_db: float) -> float:
    if reference_power <= 0:
        raise DegenerateInputError("reference has zero power")
    if math.isinf(rho_db) and rho_db > 0:
        return 0.0
    if perturb_power <= 0:
        raise DegenerateInputError("perturbation has zero power; cannot scale it to a target SNR")
    return math.sqrt(reference_power / (perturb_power * 10 ** (rho_db / 10)))


def snr_normalize(perturb: AudioBuffer, reference: AudioBuffer, rho_db: float) -> AudioBuffer:
    """Scale `perturb` so that SNR(reference, result) equals `rho_db`."""
    if len(perturb) != len(reference):
        raise InvalidInputError("perturbation and reference must have equal length")
    g = snr_gain(perturb.power(), reference.power(), rho_db)
    return perturb.with_samples(g * perturb.samples)


# ------------------------------------------------------------ test signals


def sweep_tone(f_start: float, f_end: float, duration: float, sample_rate: int) -> AudioBuffer:
    """Logarithmic chirp with unit peak amplitude (cosine phase, so x[0] = 1)."""
    if not 0 < f_start < f_end < sample_rate / 2:
        raise InvalidInputError("need 0 < f_start < f_end < sample_rate / 2")
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return AudioBuffer(signal.chirp(t, f_start, duration, f_end, method="logarithmic"), sample_rate)


def tone(freq: float, duration: float, sample_rate: int, amplitude: float = 1.0, phase: float = 0.0) -> AudioBuffer:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def fit_tone(x: np.ndarray, sample_rate: float, freq: float) -> tuple[float, np.ndarray]:
    """Least-squares sinusoid at a known frequency: (amplitude, residual)."""
    t = np.arange(len(x)) / sample_rate
    basis = np.stack([np.cos(2 * np.pi * freq * t), np.sin(2 * np.pi * freq * t), np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    fitted = basis @ coef
    return float(np.hypot(coef[0], coef[1])), x - fitted


def band_energy(x: np.ndarray, sample_rate: float, f_lo: float = 0.0, f_hi: float = math.inf) -> float:
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    return float(spec[(f >= f_lo) & (f < f_hi)].sum())


# ------------------------------------------------------------ mel analysis


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape [n_mels, fft_size/2 + 1]."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.setflags(write=False)
    return fb


def log_mel(audio: AudioBuffer, n_mels: int = 40, fft_size: int = DEFAULT_FFT, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Natural-log mel amplitude, [frames, n_mels]; power is floored at 1e-10 first."""
    spec = stft(audio, fft_size, hop)
    power = spec.magnitudes ** 2 @ mel_filterbank(n_mels, fft_size, audio.sample_rate).T
    return 0.5 * np.log(np.maximum(power, LOG_FLOOR))


def mel_cepstra(
    audio: AudioBuffer,
    order: int = 24,
    n_mels: int = 40,
    fft_size: int = DEFAULT_FFT,
    hop: int = DEFAULT_HOP,
    include_c0: bool = False,
) -> np.ndarray:
    """Mel cepstra via orthonormal DCT-II of the log-mel amplitude.

    Returns c1..c_order ([frames, order]); with `include_c0` the energy term is
    prepended.
    """
    if order < 1:
        raise InvalidInputError("order must be >= 1")
    if order >= n_mels:
        raise InvalidInputError("order must be smaller than the number of mel bands")
    ceps = dct(log_mel(audio, n_mels, fft_size, hop), type=2, norm="ortho", axis=-1)
    return ceps[:, : order + 1] if include_c0 else ceps[:, 1 : order + 1]


# ---------------------------------------------------------------------- I/O


def read_wav(path: str | Path) -> AudioBuffer:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: only mono audio is supported")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    return AudioBuffer(x, rate)


def write_wav(path: str | Path, audio: AudioBuffer, subtype: str = "PCM16") -> None:
    """Write mono WAV; `subtype` is PCM16 or FLOAT (32-bit)."""
    if subtype == "PCM16":
        data = np.round(np.clip(audio.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    elif subtype == "FLOAT":
        data = audio.samples.astype(np.float32)
    else:
        raise InvalidInputError(f"unsupported WAV subtype {subtype!r}")
    wavfile.write(str(path), audio.sample_rate, data)


def write_spectrogram_csv(path: str | Path, spec: Spectrogram) -> None:
    """One row per frame; header lists bin centre frequencies in Hz."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_start"] + [f"{f:.3f}" for f in spec.frequencies])
        for i, row in enumerate(spec.magnitudes):
            w.writerow([i * spec.frame_hop] + [repr(float(v)) for v in row])
