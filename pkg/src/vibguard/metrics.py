"""Evaluation metrics and signal transforms an adaptive attacker might try."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import dsp
from .dsp import AudioBuffer, Spectrogram
from .errors import InvalidInputError

MCD_SCALE = 10.0 / math.log(10.0)
MCD_RECOGNIZABLE = 8.0  # below this, eavesdropped speech is usually still intelligible


# ------------------------------------------------------------------- MCD


def mcd_from_cepstra(c_ref: np.ndarray, c_test: np.ndarray) -> np.ndarray:
    """Per-frame distortion in dB for aligned cepstra without c0."""
    d = np.asarray(c_ref) - np.asarray(c_test)
    return MCD_SCALE * np.sqrt(2.0 * np.sum(d * d, axis=-1))


def _dtw_path(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    i, j, path = n, m, []
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        step = np.argmin([acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]])
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
    path = np.array(path[::-1])
    return path[:, 0], path[:, 1]


def mcd(reference: AudioBuffer, test: AudioBuffer, order: int = 24, n_mels: int = 40,
        fft_size: int = dsp.DEFAULT_FFT, hop: int = dsp.DEFAULT_HOP, dtw: bool = False) -> float:
    """Mean mel-cepstral distortion (dB) over frames, c0 excluded.

    Without `dtw` the signals must already be aligned; lengths may differ by
    at most one hop and the longer one is truncated.
    """
    if reference.sample_rate != test.sample_rate:
        raise InvalidInputError("mcd needs equal sample rates")
    if not dtw:
        if abs(len(reference) - len(test)) > hop:
            raise InvalidInputError(f"lengths {len(reference)} and {len(test)} differ by more than one frame")
        n = min(len(reference), len(test))
        reference = reference.with_samples(reference.samples[:n])
        test = test.with_samples(test.samples[:n])
    ca = dsp.mel_cepstra(reference, order, n_mels, fft_size, hop)
    cb = dsp.mel_cepstra(test, order, n_mels, fft_size, hop)
    if dtw:
        ia, ib = _dtw_path(ca, cb)
        ca, cb = ca[ia], cb[ib]
    return float(np.mean(mcd_from_cepstra(ca, cb)))


# ------------------------------------------------------------------- WER


def edit_distance(ref: list, hyp: list) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer(reference_words, hypothesis_words) -> float:
    """Word error rate: (substitutions + insertions + deletions) / reference length."""
    ref, hyp = _tokens(reference_words), _tokens(hypothesis_words)
    if not ref:
        raise InvalidInputError("reference must contain at least one word")
    return edit_distance(ref, hyp) / len(ref)


# ------------------------------------------------------------------ SSIM


def ssim_2d(x: np.ndarray, y: np.ndarray, win: int = 8, data_range: float = 1.0) -> float:
    """Mean SSIM over all `win` x `win` windows (uniform weights, population statistics)."""
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise InvalidInputError(f"images smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    def local_mean(a):
        # uniform_filter centres even windows at offset win//2; keep only full windows
        m = uniform_filter(a, size=win, mode="constant")
        lo = win // 2
        return m[lo : lo + a.shape[0] - win + 1, lo : lo + a.shape[1] - win + 1]

    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def normalize_log_magnitude(mag: np.ndarray, top_db: float, dynamic_range_db: float) -> np.ndarray:
    db = 20.0 * np.log10(np.maximum(mag, dsp.LOG_FLOOR))
    return (np.clip(db, top_db - dynamic_range_db, top_db) - (top_db - dynamic_range_db)) / dynamic_range_db


def estimate_noise_floor_db(spec: Spectrogram, quantile: float = 0.1, margin_db: float = 10.0) -> float:
    """Level (dB magnitude) above which stationary noise rarely reaches.

    Mean power of the quietest `quantile` of frames, plus `margin_db`. For
    Gaussian noise a bin exceeds its mean power by 10 dB with probability e^-10.
    """
    power = spec.magnitudes ** 2
    frame_power = power.mean(axis=1)
    k = max(1, int(round(quantile * len(frame_power))))
    quiet = np.sort(frame_power)[:k].mean()
    return 10.0 * math.log10(max(quiet, dsp.LOG_FLOOR)) + margin_db


def spectrogram_ssim(a: Spectrogram, b: Spectrogram, win: int = 8, dynamic_range_db: float = 60.0,
                     floor_db: float | None = None) -> float:
    """SSIM of two spectrograms on a shared dB scale.

    Both are mapped to [0, 1] between a floor and the peak of `a`, so `a`
    acts as the reference for level. The floor is `dynamic_range_db` below
    that peak, or `floor_db` when that is higher.
    """
    if a.magnitudes.shape != b.magnitudes.shape:
        raise InvalidInputError(f"spectrogram shapes differ: {a.magnitudes.shape} vs {b.magnitudes.shape}")
    top = 20.0 * math.log10(max(float(a.magnitudes.max()), dsp.LOG_FLOOR))
    rng_db = dynamic_range_db if floor_db is None else min(dynamic_range_db, top - floor_db)
    na = normalize_log_magnitude(a.magnitudes, top, rng_db)
    nb = normalize_log_magnitude(b.magnitudes, top, rng_db)
    return ssim_2d(na, nb, win)


def audio_ssim(reference: AudioBuffer, test: AudioBuffer, fft_size: int = 256, hop: int = 64,
               above_noise: bool = True, min_range_db: float = 30.0, **kw) -> float:
    """Spectrogram SSIM of two clips.

    With `above_noise`, the dB scale stops at the reference's estimated noise
    floor (never less than `min_range_db` of range): sensor noise texture is
    random per capture, so it is excluded from the structural comparison.
    """
    if reference.sample_rate != test.sample_rate:
        raise InvalidInputError("sample rates differ")
    n = min(len(reference), len(test))
    sa = dsp.stft(reference.with_samples(reference.samples[:n]), fft_size, hop)
    sb = dsp.stft(test.with_samples(test.samples[:n]), fft_size, hop)
    if above_noise and "floor_db" not in kw:
        top = 20.0 * math.log10(max(float(sa.magnitudes.max()), dsp.LOG_FLOOR))
        kw["floor_db"] = min(estimate_noise_floor_db(sa), top - min_range_db)
    return spectrogram_ssim(sa, sb, **kw)


# ------------------------------------------------------------------- LSD


def lsd(reference: AudioBuffer, test: AudioBuffer, fft_size: int = dsp.DEFAULT_FFT, hop: int = dsp.DEFAULT_HOP) -> float:
    """Log-spectral distance in dB: per-frame RMS over bins, averaged over frames.

    Stands in for PESQ; the scale is not comparable to PESQ scores.
    """
    if reference.sample_rate != test.sample_rate:
        raise InvalidInputError("sample rates differ")
    n = min(len(reference), len(test))
    pa = dsp.stft(reference.with_samples(reference.samples[:n]), fft_size, hop).magnitudes ** 2
    pb = dsp.stft(test.with_samples(test.samples[:n]), fft_size, hop).magnitudes ** 2
    d = 10.0 * np.log10(np.maximum(pa, dsp.LOG_FLOOR) / np.maximum(pb, dsp.LOG_FLOOR))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=1))))


# ------------------------------------------------------------ transforms


def transform_quantize(audio: AudioBuffer, bits: int = 8) -> AudioBuffer:
    """Uniform mid-tread quantisation to `bits` (step 2^(1-bits)); error at most 2^-bits."""
    if not 1 <= bits <= 32:
        raise InvalidInputError("bits must be in [1, 32]")
    scale = 2.0 ** (bits - 1)
    q = np.clip(np.round(audio.samples * scale), -scale, scale - 1) / scale
    return audio.with_samples(q)


def transform_resample_roundtrip(audio: AudioBuffer, down_rate: int) -> AudioBuffer:
    down = dsp.resample(audio, down_rate)
    up = dsp.resample(down, audio.sample_rate).samples
    n = len(audio)
    up = up[:n] if len(up) >= n else np.pad(up, (0, n - len(up)))
    return audio.with_samples(up)


def transform_shelf_filter(audio: AudioBuffer, low_hz: float | None, high_hz: float | None, atten_db: float) -> AudioBuffer:
    """Low shelf at `low_hz` and high shelf at `high_hz`, each cutting by `atten_db`."""
    sections = []
    nyq = audio.sample_rate / 2
    if low_hz is not None and low_hz < nyq:
        sections.append(dsp.design_shelf_biquad("low", low_hz, audio.sample_rate, -atten_db))
    if high_hz is not None and high_hz < nyq:
        sections.append(dsp.design_shelf_biquad("high", high_hz, audio.sample_rate, -atten_db))
    if not sections or atten_db == 0:
        return audio
    return dsp.apply_biquads(audio, sections)


# ------------------------------------------------------------- reports


@dataclass
class MetricReport:
    mcd: float = math.nan
    wer: float = math.nan
    ddr: float = math.nan
    ssim: float = math.nan
    lsd_db: float = math.nan  # PESQ proxy
    snr_db: float = math.nan
    scenario: dict = field(default_factory=dict)
    notes: str = ""
    label: str = ""

    def __post_init__(self):
        if not math.isnan(self.wer) and self.wer < 0:
            raise InvalidInputError("wer must be non-negative")
        if not math.isnan(self.ddr) and not 0 <= self.ddr <= 1:
            raise InvalidInputError("ddr must lie in [0, 1]")
        if not math.isnan(self.ssim) and not -1 <= self.ssim <= 1:
            raise InvalidInputError("ssim must lie in [-1, 1]")

    @property
    def recognizable(self) -> bool:
        return self.mcd < MCD_RECOGNIZABLE


REPORT_FIELDS = ["label", "mcd", "wer", "ddr", "ssim", "lsd_db", "snr_db", "scenario", "notes", "config_hash"]


def append_reports(path: str | Path, reports: list[MetricReport], config_hash: str = "") -> None:
    """Append rows to a CSV results ledger, writing the header on first use."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            row = asdict(r)
            row["scenario"] = json.dumps(row["scenario"], sort_keys=True)
            row["config_hash"] = config_hash
            w.writerow(row)


def read_reports(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path: str | Path, summary: dict, config_hash: str) -> None:
    payload = dict(summary)
    payload["config_hash"] = config_hash
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
