"""Perturbation generator: a time-varying FIR stage plus a low-frequency additive stage.

Audio is cut into fixed segments. Each segment is filtered by FIR taps decoded
from a variational latent, then receives a band-limited perturbation drawn from
a second latent and scaled to sit `rho_db` below the segment's power.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp, features
from .dsp import AudioBuffer
from .errors import DegenerateInputError, InvalidInputError, StateError
from .nn import Adam, Linear, Module, Tensor, concat, no_grad, pad_last
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .surrogates import CtcRecognizer, DigitClassifier, ctc_loss, encode_text, mr_stft_loss
from .translator import SpectralDiscriminator, gan_objective

RATES = (16000, 48000)


@dataclass(frozen=True)
class PgmConfig:
    sample_rate: int = 16000
    segment_ms: float = 50.0
    fir_frame_ms: float = 10.0
    fir_taps: int = 65
    n_mels: int = 32
    latent_dim: int = 128
    hidden: int = 128
    lfap_length: int = 512
    lfap_hidden: int = 256
    cutoff_hz: float = 500.0
    lowpass_sections: int = 4
    fade_ms: float = 10.0
    rho_db: float = 16.0
    lambda_kl: float = 1.0
    lambda_ens: float = 1.0
    lambda_rec: float = 10.0
    k_surrogates: int = 3
    t_sr: float = 0.5  # WER above this counts as a successful defense (reporting only)
    # +1: descend on the true-label log-probabilities (degrades recognition).
    # -1: the literal reading, ascending on them.
    ensemble_sign: float = 1.0
    use_ppg: bool = False

    def __post_init__(self):
        if self.sample_rate not in RATES:
            raise InvalidInputError(f"sample rate must be one of {RATES}")
        if self.segment_ms <= 0 or self.fir_frame_ms <= 0:
            raise InvalidInputError("segment and frame lengths must be positive")
        if min(self.lambda_kl, self.lambda_ens, self.lambda_rec) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.k_surrogates < 1:
            raise InvalidInputError("need at least one surrogate")
        if self.fir_taps < 3 or self.fir_taps % 2 == 0:
            raise InvalidInputError("tap count must be odd and at least 3")
        if self.ensemble_sign not in (1.0, -1.0):
            raise InvalidInputError("ensemble_sign is +1 or -1")
        if self.segment_length % self.frame_hop:
            raise InvalidInputError("segment length must be a whole number of FIR frames")

    @property
    def segment_length(self) -> int:
        return int(round(self.sample_rate * self.segment_ms / 1000))

    @property
    def frame_hop(self) -> int:
        return int(round(self.sample_rate * self.fir_frame_ms / 1000))

    @property
    def n_frames(self) -> int:
        return self.segment_length // self.frame_hop

    @property
    def n_bins(self) -> int:
        return (self.fir_taps - 1) // 2 + 1


# ------------------------------------------------------------- FIR stage


@lru_cache(maxsize=8)
def taps_matrix(n_taps: int) -> np.ndarray:
    """Maps a real zero-phase magnitude response on n_taps//2 + 1 bins to windowed, centred taps."""
    size = n_taps - 1
    nb = size // 2 + 1
    j = np.arange(n_taps) - size // 2
    k = np.arange(nb)
    weight = np.full(nb, 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0
    m = weight[None, :] * np.cos(2 * np.pi * np.outer(j, k) / size) / size
    m = m * np.hanning(n_taps + 2)[1:-1, None]
    m.setflags(write=False)
    return m


def spectrum_to_taps(spectrum: Tensor) -> Tensor:
    """[..., bins] magnitude response -> [..., taps]; an all-ones response gives a unit impulse."""
    return F.apply_matrix(spectrum, taps_matrix(2 * (spectrum.shape[-1] - 1) + 1))


class FirGenerator(Module):
    """Encoder -> (mu, sigma) -> z -> decoder -> per-frame filter spectrum in (0, 2)."""

    def __init__(self, rng: np.random.Generator, cfg: PgmConfig = PgmConfig()):
        self.cfg = cfg
        self.fft_size = 2 * cfg.frame_hop
        n_in = cfg.n_frames * cfg.n_mels + (28 if cfg.use_ppg else 0)
        self.enc = Linear(n_in, cfg.hidden, rng)
        self.enc_mu = Linear(cfg.hidden, cfg.latent_dim, rng, gain=1.0)
        self.enc_sigma = Linear(cfg.hidden, cfg.latent_dim, rng, gain=1.0)
        self.dec = Linear(cfg.latent_dim + n_in, cfg.hidden, rng)
        self.bottleneck = Linear(cfg.hidden, cfg.hidden, rng)
        self.fir_head = Linear(cfg.hidden, cfg.n_frames * cfg.n_bins, rng, gain=0.01)

    def acoustic_features(self, segs: Tensor, ppg_model: CtcRecognizer | None = None) -> Tensor:
        """Log-mel frames aligned with the FIR frames, flattened: [N, n_frames * n_mels (+ 28)]."""
        cfg = self.cfg
        half = cfg.frame_hop // 2
        padded = pad_last(F.lift(segs), half, self.fft_size - cfg.frame_hop - half)
        lm = features.log_mel(padded, cfg.sample_rate, self.fft_size, cfg.frame_hop, cfg.n_mels)
        lm = lm[:, : cfg.n_frames]
        feats = (lm * 0.1 + 1.0).reshape(lm.shape[0], cfg.n_frames * cfg.n_mels)
        if cfg.use_ppg:
            if ppg_model is None:
                raise InvalidInputError("use_ppg needs a recognizer for frame posteriors")
            feats = concat([feats, _ppg_summary(ppg_model, segs, cfg.sample_rate)], axis=1)
        return feats

    def encode(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        h = self.enc(feats).leaky_relu(0.1)
        mu = self.enc_mu(h)
        sigma = self.enc_sigma(h).softplus() + 1e-4
        return mu, sigma

    def decode(self, z: Tensor, feats: Tensor) -> Tensor:
        h = self.dec(concat([z, feats], axis=1)).leaky_relu(0.1)
        h = h + self.bottleneck(h).leaky_relu(0.1)
        raw = self.fir_head(h).reshape(h.shape[0], self.cfg.n_frames, self.cfg.n_bins)
        return raw.tanh() + 1.0

    def forward(self, segs: Tensor, eps: np.ndarray, ppg_model=None):
        """segs [N, segment_length] -> (filtered [N, L], taps [N, frames, taps], mu, sigma)."""
        feats = self.acoustic_features(segs, ppg_model)
        mu, sigma = self.encode(feats)
        z = mu + sigma * Tensor(eps)
        taps = spectrum_to_taps(self.decode(z, feats))
        return F.tv_fir(segs, taps, self.cfg.frame_hop), taps, mu, sigma


def _ppg_summary(model: CtcRecognizer, segs: Tensor, rate: int) -> Tensor:
    """Segment-averaged frame posteriors of a recognizer (27 symbols) plus a bias column."""
    x = features.resample_tensor(segs, rate, model.front.sample_rate)
    need = model.front.fft_size
    if x.shape[-1] < need:
        x = pad_last(x, 0, need - x.shape[-1])
    post = model(x).exp().mean(axis=1)
    return concat([post, Tensor(np.ones((post.shape[0], 1)))], axis=1)


# ------------------------------------------------------------ LFAP stage


def _raised_cosine_fade(n: int, fade: int) -> np.ndarray:
    w = np.ones(n)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(fade) + 0.5) / fade)
        w[:fade] = ramp
        w[n - fade :] = np.minimum(w[n - fade :], ramp[::-1])
    return w


def tile_matrix(n: int, block: int, overlap: int) -> np.ndarray:
    """[n, block] matrix repeating a block with linear crossfades over `overlap` samples."""
    m = np.zeros((n, block))
    if n <= block:
        m[np.arange(n), np.arange(n)] = 1.0
        return m
    step = block - overlap
    ramp = dsp.crossfade_ramp(overlap)
    start = 0
    while start < n:
        w = np.ones(block)
        if start > 0:
            w[:overlap] = ramp
        if start + step < n:
            w[block - overlap :] *= 1.0 - ramp
        idx = np.arange(start, min(start + block, n))
        m[idx, idx - start] += w[: len(idx)]
        start += step
    return m


@lru_cache(maxsize=16)
def lfap_post_matrix(n: int, sample_rate: int, block: int = 512, cutoff_hz: float = 500.0,
                     sections: int = 4, fade_ms: float = 5.0) -> np.ndarray:
    """Fixed linear post-chain: tile to n, fade the edges, then a zero-phase low-pass.

    The low-pass runs the biquad cascade forward and backward over a zero-padded
    copy, so the magnitude response is squared and the phase is zero.
    """
    fade = int(round(sample_rate * fade_ms / 1000))
    if 2 * fade > n:
        raise InvalidInputError("segment shorter than its fades")
    m = tile_matrix(n, block, overlap=block // 8)
    m *= _raised_cosine_fade(n, fade)[:, None]
    sos = np.stack([s.sos() for s in dsp.design_lowpass_cascade(cutoff_hz, sample_rate, sections)])
    pad = n
    padded = np.pad(m, ((pad, pad), (0, 0)))
    y = signal.sosfilt(sos, padded, axis=0)
    y = signal.sosfilt(sos, y[::-1], axis=0)[::-1]
    out = np.ascontiguousarray(y[pad : pad + n])
    out.setflags(write=False)
    return out


class LfapGenerator(Module):
    """MLP from a latent to a 512-sample block in [-1, 1]."""

    def __init__(self, rng: np.random.Generator, cfg: PgmConfig = PgmConfig()):
        self.cfg = cfg
        self.l1 = Linear(cfg.latent_dim, cfg.lfap_hidden, rng)
        self.l2 = Linear(cfg.lfap_hidden, cfg.lfap_hidden, rng)
        self.out = Linear(cfg.lfap_hidden, cfg.lfap_length, rng, gain=1.0)

    def raw(self, z: Tensor) -> Tensor:
        h = self.l1(F.lift(z)).relu()
        h = self.l2(h).relu()
        return self.out(h).tanh()

    def shaped(self, z: Tensor, n: int) -> Tensor:
        """Post-chain output before level normalisation: [N, n]."""
        c = self.cfg
        m = lfap_post_matrix(n, c.sample_rate, c.lfap_length, c.cutoff_hz, c.lowpass_sections, c.fade_ms)
        return F.apply_matrix(self.raw(z), m)

    def forward(self, z: Tensor, reference: Tensor) -> Tensor:
        """z [N, latent], reference [N, n] -> perturbation [N, n] at `rho_db` below each reference row.

        Rows with a silent reference get no perturbation.
        """
        shaped = self.shaped(z, reference.shape[-1])
        return snr_scale(shaped, reference, self.cfg.rho_db)


def snr_scale(p: Tensor, reference: Tensor, rho_db: float) -> Tensor:
    """Scale each row of p so that its power is rho_db below the matching reference row."""
    ref_power = np.mean(F.lift(reference).data ** 2, axis=-1, keepdims=True)
    if math.isinf(rho_db) and rho_db > 0:
        return p * 0.0
    target_rms = np.sqrt(ref_power / 10 ** (rho_db / 10))
    p_rms = ((p * p).mean(axis=-1, keepdims=True) + 1e-30).sqrt()
    return p * Tensor(target_rms) / p_rms


# ------------------------------------------------------------- generator


class PerturbationGenerator(Module):
    def __init__(self, rng: np.random.Generator, cfg: PgmConfig = PgmConfig()):
        self.cfg = cfg
        self.fir = FirGenerator(rng, cfg)
        self.lfap = LfapGenerator(rng, cfg)

    def segment(self, x: Tensor) -> tuple[Tensor, int]:
        """[B, n] -> ([B * segments, L], n); the tail is zero-padded to a whole segment."""
        L = self.cfg.segment_length
        n = x.shape[-1]
        pad = -n % L
        if pad:
            x = pad_last(x, 0, pad)
        return x.reshape(x.shape[0] * (x.shape[-1] // L), L), n

    def forward(self, x: Tensor, eps: np.ndarray, zc: np.ndarray, ppg_model=None):
        """x [B, n] -> (perturbed [B, n] clipped to [-1, 1], mu, sigma).

        eps and zc hold one latent row per segment, in segment order.
        """
        B = x.shape[0]
        segs, n = self.segment(F.lift(x))
        filtered, _, mu, sigma = self.fir(segs, eps, ppg_model)
        additive = self.lfap(Tensor(zc), segs)
        y = (filtered + additive).reshape(B, -1)[:, :n]
        return y.clip(-1.0, 1.0), mu, sigma


def segment_latents(seed: int, first: int, count: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(eps, z_c) rows for segments first .. first + count - 1; each row depends only on (seed, index)."""
    eps = np.empty((count, dim))
    zc = np.empty((count, dim))
    for i in range(count):
        rng = np.random.default_rng([seed, first + i])
        eps[i] = rng.standard_normal(dim)
        zc[i] = rng.standard_normal(dim)
    return eps, zc


def _check_rate(pgm: PerturbationGenerator, audio: AudioBuffer):
    if audio.sample_rate != pgm.cfg.sample_rate:
        raise InvalidInputError(f"generator runs at {pgm.cfg.sample_rate} Hz, audio is {audio.sample_rate} Hz")


def generate_fir(gen: FirGenerator, segment: AudioBuffer, seed: int) -> dsp.TimeVaryingFir:
    """Per-frame taps for one segment; the seed drives the reparameterised latent."""
    cfg = gen.cfg
    if segment.sample_rate != cfg.sample_rate:
        raise InvalidInputError(f"generator runs at {cfg.sample_rate} Hz, segment is {segment.sample_rate} Hz")
    if len(segment) != cfg.segment_length:
        raise InvalidInputError(f"segment must hold {cfg.segment_length} samples")
    eps = np.random.default_rng(seed).standard_normal((1, cfg.latent_dim))
    with no_grad():
        _, taps, _, _ = gen(Tensor(segment.samples[None]), eps)
    return dsp.TimeVaryingFir(taps.data[0], cfg.frame_hop)


def generate_lfap(gen: LfapGenerator, z_c, reference: AudioBuffer) -> AudioBuffer:
    """Band-limited perturbation as long as `reference`, exactly rho_db below its power."""
    cfg = gen.cfg
    if reference.sample_rate != cfg.sample_rate:
        raise InvalidInputError(f"generator runs at {cfg.sample_rate} Hz, reference is {reference.sample_rate} Hz")
    if reference.power() <= 0:
        raise DegenerateInputError("reference has zero power")
    z = np.asarray(z_c, dtype=float).reshape(1, -1)
    if z.shape[1] != cfg.latent_dim:
        raise InvalidInputError(f"latent must have {cfg.latent_dim} entries")
    with no_grad():
        shaped = gen.shaped(Tensor(z), len(reference)).data[0]
    if not np.any(shaped):
        raise DegenerateInputError("generator produced an all-zero block")
    return dsp.snr_normalize(AudioBuffer(shaped, cfg.sample_rate), reference, cfg.rho_db)


def perturb(pgm: PerturbationGenerator, audio: AudioBuffer, seed: int) -> AudioBuffer:
    """Segment, filter, add the low-frequency perturbation, clip. Output length equals input length."""
    _check_rate(pgm, audio)
    L = pgm.cfg.segment_length
    n_seg = -(-len(audio) // L)
    eps, zc = segment_latents(seed, 0, n_seg, pgm.cfg.latent_dim)
    with no_grad():
        y, _, _ = pgm(Tensor(audio.samples[None]), eps, zc)
    return audio.with_samples(y.data[0])


def with_rho(pgm: PerturbationGenerator, rho_db: float) -> PerturbationGenerator:
    """Same weights, different LFAP level (shares parameter storage with `pgm`)."""
    cfg = replace(pgm.cfg, rho_db=rho_db)
    out = PerturbationGenerator.__new__(PerturbationGenerator)
    out.cfg = cfg
    out.fir = pgm.fir
    out.lfap = LfapGenerator.__new__(LfapGenerator)
    out.lfap.__dict__.update(pgm.lfap.__dict__)
    out.lfap.cfg = cfg
    return out


def count_segments(pgm: PerturbationGenerator, audio: AudioBuffer) -> int:
    return -(-len(audio) // pgm.cfg.segment_length)


class StreamingPerturber:
    """Push one segment at a time, get its perturbed version back.

    Output equals `perturb` on the concatenated input. Each push records its
    wall-clock latency in seconds.
    """

    def __init__(self, pgm: PerturbationGenerator, seed: int, log=None):
        self.pgm = pgm
        self.seed = seed
        self.index = 0
        self.latencies: list[float] = []
        self.log = log
        # Build the cached filter banks and matrices now, not inside the first timed push.
        L = pgm.cfg.segment_length
        eps, zc = segment_latents(seed, 0, 1, pgm.cfg.latent_dim)
        with no_grad():
            pgm(Tensor(np.full((1, L), 1e-3)), eps, zc)

    def push(self, frame: np.ndarray) -> np.ndarray:
        L = self.pgm.cfg.segment_length
        frame = np.asarray(frame, dtype=float)
        if frame.ndim != 1 or not 0 < len(frame) <= L:
            raise InvalidInputError(f"push 1-D frames of at most {L} samples")
        t0 = time.perf_counter()
        eps, zc = segment_latents(self.seed, self.index, 1, self.pgm.cfg.latent_dim)
        with no_grad():
            y, _, _ = self.pgm(Tensor(frame[None]), eps, zc)
        out = y.data[0]
        dt = time.perf_counter() - t0
        self.latencies.append(dt)
        if self.log:
            self.log({"segment": self.index, "latency_ms": dt * 1000})
        self.index += 1
        return out


# ---------------------------------------------------------------- losses


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - ln sigma^2 - 1) over the latent axis, averaged over rows."""
    mu, sigma = F.lift(mu), F.lift(sigma)
    if np.any(sigma.data <= 0):
        raise InvalidInputError("sigma must be positive")
    terms = mu * mu + sigma * sigma - (sigma * sigma).log() - 1.0
    if terms.ndim == 0:
        return terms * 0.5
    per_row = terms.sum(axis=-1) * 0.5
    return per_row.mean() if per_row.ndim else per_row


@dataclass
class Surrogate:
    """One ensemble member; either model may be absent."""

    recognizer: CtcRecognizer | None = None
    classifier: DigitClassifier | None = None

    def modules(self) -> list[Module]:
        return [m for m in (self.recognizer, self.classifier) if m is not None]


def ensemble_loss(surrogates: list[Surrogate], translated, y_sr, y_ac) -> Tensor:
    """sum_k [log P_k(y_sr | x) + log Y_k(y_ac | x)], each averaged over the batch.

    `translated` is [B, n] at the surrogate rate (or one AudioBuffer); y_sr holds
    one token list per row and y_ac one class index per row.
    """
    x = translated
    if isinstance(x, AudioBuffer):
        x = Tensor(x.samples[None])
        y_sr = [y_sr] if y_sr is not None and (len(y_sr) == 0 or np.isscalar(y_sr[0])) else y_sr
        y_ac = None if y_ac is None else np.atleast_1d(y_ac)
    if not surrogates:
        raise InvalidInputError("empty surrogate ensemble")
    total = None
    for s in surrogates:
        if s.recognizer is not None:
            term = -ctc_loss(s.recognizer(x), y_sr)
            total = term if total is None else total + term
        if s.classifier is not None:
            lp = s.classifier(x)
            idx = np.asarray(y_ac, dtype=int)
            term = lp[np.arange(lp.shape[0]), idx].mean()
            total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("surrogates hold no models")
    return total


def stft_distance(a: Tensor, b: Tensor) -> Tensor:
    """Multi-resolution STFT loss: spectral convergence plus log-magnitude L1."""
    return mr_stft_loss(F.lift(a), F.lift(b), resolutions=((512, 128), (1024, 256), (2048, 512)))


def reconstruction_loss(original, perturbed, translated_orig, translated_pert) -> Tensor:
    """E|perturbed - original| - L_stft(translated_pert, translated_orig)."""
    x, xp = F.lift(original), F.lift(perturbed)
    if x.shape != xp.shape:
        raise InvalidInputError("original and perturbed lengths differ")
    if F.lift(translated_orig).shape != F.lift(translated_pert).shape:
        raise InvalidInputError("translated lengths differ")
    return F.l1(xp, x) - stft_distance(translated_pert, translated_orig)


class PlaybackDiscriminator(Module):
    """Log-spectral discriminator on playback-rate audio."""

    def __init__(self, rng: np.random.Generator, sample_rate: int = 16000):
        fft = 512 * max(1, sample_rate // 16000)
        fft = 1 << (fft - 1).bit_length()
        self.sample_rate = sample_rate
        self.net = SpectralDiscriminator(rng, fft_size=fft, hop=fft // 4, widths=(32, 32))

    def forward(self, y: Tensor) -> Tensor:
        return self.net(y)[0]


def adversarial_loss_pgm(disc, original, perturbed, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """(L, L_gen) with the clean audio as real and the perturbed audio as fake."""
    real = [disc(F.lift(original))] if original is not None else None
    fake = [disc(F.lift(perturbed))] if perturbed is not None else None
    return gan_objective(real, fake, non_saturating)


# -------------------------------------------------------------- training


@dataclass(frozen=True)
class PgmHyper:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    non_saturating: bool = False


@dataclass(frozen=True)
class PgmExample:
    audio: AudioBuffer
    label: int
    transcript: str


PGM_CURVE_FIELDS = ["step", "L_adv", "L_kl", "L_ens", "L_rec", "L_d"]


def frozen_checksums(translator: Module, surrogates: list[Surrogate]) -> dict[str, str]:
    mods = {"translator": translator}
    for k, s in enumerate(surrogates):
        for m in s.modules():
            mods[f"surrogate{k}.{type(m).__name__}"] = m
    out = {}
    for name, m in mods.items():
        if not m.is_frozen():
            raise StateError(f"{name} must be frozen before generator training")
        out[name] = m.checksum()
    return out


def _verify_checksums(translator, surrogates, before: dict[str, str]):
    after = frozen_checksums(translator, surrogates)
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise StateError(f"frozen models changed during training: {changed}")


def train_pgm(translator, surrogates: list[Surrogate], data: list[PgmExample], references: list[AudioBuffer],
              hyper: PgmHyper = PgmHyper(), cfg: PgmConfig = PgmConfig(), out_dir=None, log=None,
              init: PerturbationGenerator | None = None):
    """Alternate playback-discriminator and generator updates through the frozen translator and surrogates.

    Returns (generator, discriminator, curves).
    """
    if not data or not references:
        raise InvalidInputError("training needs labelled audio and side-channel references")
    if not surrogates:
        raise InvalidInputError("need at least one surrogate")
    before = frozen_checksums(translator, surrogates)
    rate = cfg.sample_rate
    if any(d.audio.sample_rate != rate for d in data):
        raise InvalidInputError(f"training audio must be at {rate} Hz")
    lengths = {len(d.audio) for d in data}
    if len(lengths) != 1:
        raise InvalidInputError("training clips must share one length")
    ref_lengths = {len(r) for r in references}
    if len(ref_lengths) != 1:
        raise InvalidInputError("references must share one length")
    rng = np.random.default_rng(hyper.seed)
    pgm = init if init is not None else PerturbationGenerator(np.random.default_rng([hyper.seed, 1]), cfg)
    disc = PlaybackDiscriminator(np.random.default_rng([hyper.seed, 2]), rate)
    opt_g = Adam(pgm.parameters(), lr=hyper.lr, betas=(0.5, 0.999))
    opt_d = Adam(disc.parameters(), lr=hyper.lr, betas=(0.5, 0.999))
    X = np.stack([d.audio.samples for d in data])
    R = np.stack([r.samples for r in references])
    tokens = [encode_text(d.transcript) for d in data]
    labels = np.array([d.label for d in data])
    ppg = next((s.recognizer for s in surrogates if s.recognizer is not None), None) if cfg.use_ppg else None
    n_seg = -(-X.shape[1] // cfg.segment_length)
    curves = []
    for step in range(hyper.steps):
        idx = rng.integers(len(X), size=hyper.batch)
        ridx = rng.integers(len(R), size=hyper.batch)
        eps = rng.standard_normal((hyper.batch * n_seg, cfg.latent_dim))
        zc = rng.standard_normal((hyper.batch * n_seg, cfg.latent_dim))
        x = Tensor(X[idx])
        ref = Tensor(R[ridx])

        with no_grad():
            fake, _, _ = pgm(x, eps, zc, ppg)
        objective, _ = adversarial_loss_pgm(disc, x, fake, hyper.non_saturating)
        loss_d = -objective
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        for p in disc.parameters():
            p.requires_grad = False
        xp, mu, sigma = pgm(x, eps, zc, ppg)
        src = _to_rate(xp, rate, translator.source_rate)
        with no_grad():
            t_orig = translator(_to_rate(x, rate, translator.source_rate), ref)
        t_pert = translator(src, ref)
        _, l_adv = adversarial_loss_pgm(disc, None, xp, hyper.non_saturating)
        l_kl = kl_loss(mu, sigma)
        l_ens = ensemble_loss(surrogates, t_pert, [tokens[i] for i in idx], labels[idx])
        l_rec = reconstruction_loss(x, xp, t_orig, t_pert)
        loss = l_adv + cfg.lambda_kl * l_kl + cfg.ensemble_sign * cfg.lambda_ens * l_ens + cfg.lambda_rec * l_rec
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        for p in disc.parameters():
            p.requires_grad = True

        row = {"step": step, "L_adv": l_adv.item(), "L_kl": l_kl.item(), "L_ens": l_ens.item(),
               "L_rec": l_rec.item(), "L_d": loss_d.item()}
        curves.append(row)
        if log:
            log(row)
    _verify_checksums(translator, surrogates, before)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"config": asdict(cfg), "hyper": asdict(hyper), "frozen": before}
        save_checkpoint(out / "pgm.ckpt", pgm.state_dict(), opt_g.state_dict(), meta)
        save_checkpoint(out / "playback_disc.ckpt", disc.state_dict(), opt_d.state_dict(), meta)
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PGM_CURVE_FIELDS)
            w.writeheader()
            w.writerows(curves)
    return pgm, disc, curves


def _to_rate(x: Tensor, rate: int, target: int) -> Tensor:
    return features.resample_tensor(x, rate, target) if rate != target else x


def load_pgm(path) -> PerturbationGenerator:
    tensors, _, meta = load_checkpoint(path)
    cfg = PgmConfig(**meta["config"])
    pgm = PerturbationGenerator(np.random.default_rng(0), cfg)
    pgm.load_state_dict(tensors)
    return pgm
