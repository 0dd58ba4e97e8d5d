"""Few-shot unpaired audio-to-side-channel translator and its multi-period discriminator.

The translator works in a learned filterbank domain: a strided conv analysis
initialised to a windowed real DFT, residual content/bottleneck blocks, AdaIN
decoder blocks driven by a style code from the reference, a per-band log-gain
from the same code, and a transposed-conv synthesis that is the exact inverse
of the analysis at initialisation.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp, features, metrics
from .dsp import AudioBuffer
from .errors import InvalidInputError
from .nn import Adam, Conv1d, ConvTranspose1d, Linear, Module, Tensor, concat, no_grad, pad_last
from .nn import functional as F
from .nn.checkpoint import save_checkpoint

FRAME = 64
HOP = 16
N_BANDS = FRAME // 2 + 1
# analysis channel -> frequency band: cos rows k=0..32 then sin rows k=1..31
CHANNEL_BAND = np.concatenate([np.arange(N_BANDS), np.arange(1, N_BANDS - 1)])


def filterbank_bases() -> tuple[np.ndarray, np.ndarray]:
    """(analysis [64, 64], synthesis [64, 64]) with synthesis o analysis = identity at hop 16."""
    n = np.arange(FRAME)
    w = dsp.hann(FRAME)
    rows, weights = [], []
    for k in range(N_BANDS):
        rows.append(np.cos(2 * np.pi * k * n / FRAME))
        weights.append(1.0 if k in (0, FRAME // 2) else 2.0)
    for k in range(1, N_BANDS - 1):
        rows.append(np.sin(2 * np.pi * k * n / FRAME))
        weights.append(2.0)
    basis = np.array(rows)
    # squared periodic Hann summed over the FRAME/HOP overlapping frames is constant (1.5)
    wsum = sum(w[(n + j * HOP) % FRAME] ** 2 for j in range(FRAME // HOP)).mean()
    analysis = basis * w
    synthesis = np.array(weights)[:, None] * basis * w / (FRAME * wsum)
    return analysis, synthesis


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.c1 = Conv1d(channels, channels, kernel, rng)
        self.c2 = Conv1d(channels, channels, kernel, rng)
        self.c2.weight.data[:] = 0.0

    def forward(self, h: Tensor) -> Tensor:
        return h + self.c2(self.c1(h).leaky_relu())


class AdaInResBlock(Module):
    def __init__(self, channels: int, style_dim: int, rng: np.random.Generator, kernel: int = 3):
        self.c1 = Conv1d(channels, channels, kernel, rng)
        self.c2 = Conv1d(channels, channels, kernel, rng)
        self.c2.weight.data[:] = 0.0
        self.style = Linear(style_dim, 2 * channels, rng, gain=1.0)
        self.channels = channels

    def forward(self, h: Tensor, s: Tensor) -> Tensor:
        p = self.style(s)
        scale, shift = p[:, : self.channels] + 1.0, p[:, self.channels :]
        return h + self.c2(F.adain(self.c1(h), scale, shift).leaky_relu())


class DomainEncoder(Module):
    """Style code from a reference clip: conv blocks on its filterbank view plus pooled log band power."""

    def __init__(self, rng: np.random.Generator, style_dim: int = 128, width: int = 64, n_blocks: int = 2):
        self.blocks = [Conv1d(2 * N_BANDS - 2 if i == 0 else width, width, 3, rng, stride=2) for i in range(n_blocks)]
        self.mix = Linear(width + N_BANDS, style_dim, rng)
        self.out = Linear(style_dim, style_dim, rng, gain=1.0)

    def forward(self, spec: Tensor, band_logpow: Tensor) -> Tensor:
        h = spec
        for blk in self.blocks:
            h = blk(h).leaky_relu()
        pooled = concat([h.mean(axis=-1), band_logpow], axis=1)
        return self.out(self.mix(pooled).leaky_relu())


def band_log_power(spec: Tensor) -> Tensor:
    """Time-averaged log power per band from filterbank coefficients [B, 64, T], scaled to roughly unit range."""
    sq = spec * spec
    cos, sin = sq[:, :N_BANDS], sq[:, N_BANDS:]
    power = concat([cos[:, :1], cos[:, 1:-1] + sin, cos[:, -1:]], axis=1).mean(axis=-1)
    return ((power + 1e-12).log() + 10.0) * 0.2


class TranslatorModel(Module):
    def __init__(self, rng: np.random.Generator, source_rate: int = 16000, sensor_rate: int = 8000,
                 sensor: str = "mmwave", style_dim: int = 128, n_content: int = 2, n_bottleneck: int = 2,
                 n_decoder: int = 2, log_gain_scale: float = 5.0, level_gain_scale: float = 25.0):
        self.source_rate = source_rate
        self.sensor_rate = sensor_rate
        self.sensor = sensor
        self.log_gain_scale = log_gain_scale
        self.level_gain_scale = level_gain_scale
        ana, syn = filterbank_bases()
        self.analysis = Conv1d(1, FRAME, FRAME, rng, stride=HOP, padding=FRAME - HOP, bias=False)
        self.analysis.weight.data[:] = ana[:, None, :]
        self.synthesis = ConvTranspose1d(FRAME, 1, FRAME, rng, stride=HOP, padding=FRAME - HOP, bias=False)
        self.synthesis.weight.data[:] = syn[:, None, :]
        for w in (self.analysis.weight, self.synthesis.weight):
            w.name, w.requires_grad = "fixed", False  # fixed bases: not parameters, not checkpointed
        self.content = [ResBlock(FRAME, rng) for _ in range(n_content)]
        self.bottleneck = [ResBlock(FRAME, rng) for _ in range(n_bottleneck)]
        self.decoder = [AdaInResBlock(FRAME, style_dim, rng) for _ in range(n_decoder)]
        self.domain = DomainEncoder(rng, style_dim)
        # band gains: a per-band path from the reference-vs-content level difference plus a style correction
        self.level_scale = Tensor(np.zeros(N_BANDS), requires_grad=True, name="param")
        self.level_bias = Tensor(np.zeros(N_BANDS), requires_grad=True, name="param")
        self.film_style = Linear(style_dim, N_BANDS, rng, gain=1.0)
        self.noise_log_scale = Tensor(np.zeros(1), requires_grad=True, name="param")

    def _analyse(self, x: Tensor) -> tuple[Tensor, int]:
        n = x.shape[-1]
        pad = -n % HOP
        u = pad_last(x, 0, pad) if pad else x
        return self.analysis(u.reshape(u.shape[0], 1, u.shape[-1])), n

    def style(self, reference: Tensor) -> tuple[Tensor, Tensor]:
        """(style code [B, style_dim], band log power [B, 33]) of a reference clip."""
        spec, _ = self._analyse(reference)
        level = band_log_power(spec)
        return self.domain(spec, level), level

    def band_gains(self, s: Tensor, relative_level: Tensor) -> Tensor:
        """Per-band natural-log gains [B, 33] applied before synthesis."""
        return (relative_level * self.level_scale + self.level_bias) * self.level_gain_scale + self.film_style(s)

    def forward(self, x: Tensor, reference: Tensor, reference_rate: int | None = None) -> Tensor:
        """x [B, n] at source rate, reference [B, m] -> [B, n * reference_rate / source_rate]."""
        rate = self.sensor_rate if reference_rate is None else reference_rate
        if x.ndim != 2 or reference.ndim != 2 or x.shape[0] != reference.shape[0]:
            raise InvalidInputError("translator expects batched [B, n] content and reference")
        u = features.resample_tensor(x, self.source_rate, rate)
        h, n = self._analyse(u)
        for blk in self.content + self.bottleneck:
            h = blk(h)
        s, ref_level = self.style(reference)
        relative = ref_level - band_log_power(h)
        for blk in self.decoder:
            h = blk(h, s)
        gains = self.band_gains(s, relative)[:, CHANNEL_BAND].exp()
        y = self.synthesis(h * gains.reshape(*gains.shape, 1))
        y = y.reshape(y.shape[0], y.shape[-1])[:, :n]
        return y + self.sensor_noise(x, reference, n)

    def sensor_noise(self, x: Tensor, reference: Tensor, n: int) -> Tensor:
        """White noise at the reference's quiet-frame level; seeded by the content so calls stay pure."""
        level = quiet_level(reference.data)
        rng = np.random.default_rng(zlib.crc32(np.ascontiguousarray(x.data).tobytes()))
        eps = rng.standard_normal((x.shape[0], n)) * level[:, None]
        return self.noise_log_scale.exp() * eps


def quiet_level(v: np.ndarray, frame: int = 256, quantile: float = 0.1) -> np.ndarray:
    """RMS of the quietest `quantile` of frames per row of v [B, m]: a noise-floor estimate."""
    n = v.shape[-1] // frame * frame
    if n == 0:
        return np.sqrt(np.mean(v * v, axis=-1))
    p = np.mean(v[:, :n].reshape(v.shape[0], -1, frame) ** 2, axis=-1)
    k = max(1, int(round(quantile * p.shape[1])))
    return np.sqrt(np.sort(p, axis=1)[:, :k].mean(axis=1))


def translate(model: TranslatorModel, audio: AudioBuffer, reference: AudioBuffer) -> AudioBuffer:
    """Render `audio` as if captured by the side channel that produced `reference`."""
    if audio.sample_rate != model.source_rate:
        raise InvalidInputError(f"translator expects {model.source_rate} Hz audio, got {audio.sample_rate}")
    if reference.sample_rate not in (model.sensor_rate, model.source_rate):
        raise InvalidInputError(f"reference rate {reference.sample_rate} is neither sensor nor source rate")
    with no_grad():
        y = model(Tensor(audio.samples[None]), Tensor(reference.samples[None]), reference.sample_rate)
    return AudioBuffer(y.data[0], reference.sample_rate)


# ------------------------------------------------------------ discriminator


class PeriodDiscriminator(Module):
    def __init__(self, period: int, rng: np.random.Generator, widths=(16, 32, 32)):
        self.period = period
        chans = (1,) + tuple(widths)
        self.convs = [
            Conv1d(chans[i], chans[i + 1], 5 if i < 2 else 3, rng, stride=3 if i < 2 else 1)
            for i in range(len(widths))
        ]
        self.head = Conv1d(chans[-1], 1, 3, rng, gain=1.0)

    def forward(self, y: Tensor) -> tuple[Tensor, list[Tensor]]:
        """y [B, n] -> (probabilities [B, p, L'], feature maps each [B, p, C, L'])."""
        B, n = y.shape
        p = self.period
        pad = -n % p
        if pad:
            y = pad_last(y, 0, pad)
        L = y.shape[-1] // p
        h = y.reshape(B, L, p).transpose(0, 2, 1).reshape(B * p, 1, L)
        feats = []
        for conv in self.convs:
            h = conv(h).leaky_relu(0.1)
            feats.append(h.reshape(B, p, h.shape[1], h.shape[2]))
        logits = self.head(h)
        return logits.sigmoid().reshape(B, p, logits.shape[-1]), feats


class SpectralDiscriminator(Module):
    """Log-magnitude STFT sub-discriminator: bands as channels, convolved over time.

    Works in dB-like units, so quiet bands weigh as much as loud ones.
    """

    def __init__(self, rng: np.random.Generator, fft_size: int = 256, hop: int = 64, widths=(64, 64),
                 spectrum_feature_gain: float = 5.0):
        self.spectrum_feature_gain = spectrum_feature_gain
        self.fft_size = fft_size
        self.hop = hop
        nb = fft_size // 2 + 1
        chans = (nb,) + tuple(widths)
        self.convs = [Conv1d(chans[i], chans[i + 1], 3, rng, stride=1 if i == 0 else 2) for i in range(len(widths))]
        self.head = Conv1d(chans[-1], 1, 3, rng, gain=1.0)

    def forward(self, y: Tensor) -> tuple[Tensor, list[Tensor]]:
        mag = features.stft_magnitude(y, self.fft_size, self.hop, eps=1e-6)
        h = ((mag * mag).log() * 0.2 + 2.0).transpose(0, 2, 1)  # ~[-1, 2] for the levels seen here
        # the fixed log-spectral stage is exposed in nats: the one feature that always tracks band level
        feats = [h.reshape(h.shape[0], 1, h.shape[1], h.shape[2]) * self.spectrum_feature_gain]
        for conv in self.convs:
            h = conv(h).leaky_relu(0.1)
            feats.append(h.reshape(h.shape[0], 1, h.shape[1], h.shape[2]))
        return self.head(h).sigmoid(), feats


class EveDiscriminator(Module):
    """Multi-period discriminator plus a log-spectral sub-discriminator.

    `features` is the view without the prediction heads.
    """

    def __init__(self, rng: np.random.Generator, periods=(2, 3, 5), input_gain: float = 30.0, spectral: bool = True):
        if len(periods) < 2:
            raise InvalidInputError("need at least two periods")
        self.periods = tuple(periods)
        self.input_gain = input_gain
        self.subs = [PeriodDiscriminator(p, rng) for p in periods]
        self.spectral = SpectralDiscriminator(rng) if spectral else None

    def forward(self, y: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        probs, feats = [], []
        scaled = y * self.input_gain
        for sub in self.subs:
            pr, fe = sub(scaled)
            probs.append(pr)
            feats.extend(fe)
        if self.spectral is not None:
            pr, fe = self.spectral(y)
            probs.append(pr)
            feats.extend(fe)
        return probs, feats

    def features(self, y: Tensor) -> list[Tensor]:
        return self(y)[1]


# ------------------------------------------------------------------ losses


def _mean_log(probs: list[Tensor], complement: bool) -> Tensor:
    terms = [F.clamped_log(1.0 - p if complement else p).mean() for p in probs]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def gan_objective(real_probs: list[Tensor] | None, fake_probs: list[Tensor] | None,
                  non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """(L, L_gen) from discriminator outputs.

    L = E[log D(real)] + E[log(1 - D(fake))], which the discriminator ascends.
    L_gen is what the generator descends: E[log(1 - D(fake))], or
    -E[log D(fake)] with `non_saturating`.
    """
    zero = Tensor(np.array(0.0))
    real_term = _mean_log(real_probs, False) if real_probs else zero
    fake_term = _mean_log(fake_probs, True) if fake_probs else zero
    if fake_probs and non_saturating:
        gen = -_mean_log(fake_probs, False)
    else:
        gen = fake_term
    return real_term + fake_term, gen


def gan_loss(disc: EveDiscriminator, real: Tensor | None, fake: Tensor | None,
             non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    real_probs = disc(real)[0] if real is not None else None
    fake_probs = disc(fake)[0] if fake is not None else None
    return gan_objective(real_probs, fake_probs, non_saturating)


def consistency_loss(model, audio: Tensor) -> Tensor:
    """E|x - T(x, x)| with the source clip as its own reference."""
    rate = getattr(model, "source_rate", None)
    out = model(audio, audio, rate) if rate is not None else model(audio, audio)
    return F.l1(out, audio)


def _pool(f: Tensor) -> Tensor:
    # [B, p, C, L] -> [B, C]: utterance-level statistics, so unpaired clips are comparable
    return f.mean(axis=(1, 3))


def feature_matching_from(feats_a: list[Tensor], feats_b: list[Tensor], pooled: bool = True) -> Tensor:
    if len(feats_a) != len(feats_b):
        raise InvalidInputError("feature stacks have different depths")
    total = None
    for fa, fb in zip(feats_a, feats_b):
        if pooled:
            fa, fb = _pool(fa), _pool(fb)
        term = F.l1(fa, fb)
        total = term if total is None else total + term
    return total


def feature_matching_loss(disc: EveDiscriminator, translated: Tensor, reference: Tensor, pooled: bool = True) -> Tensor:
    """Sum over layers of the mean-L1 gap between discriminator features.

    `pooled` compares time-averaged features, which is what makes the term
    meaningful for unpaired clips; pooled=False compares element-wise.
    """
    return feature_matching_from(disc.features(translated), disc.features(reference), pooled)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class EveHyper:
    beta_con: float = 1.0
    beta_fm: float = 1.0
    lr: float = 1e-3
    steps: int = 300
    batch: int = 8
    seed: int = 0
    non_saturating: bool = False
    style_dim: int = 128
    block_lr_scale: float = 0.1
    disc_lr_scale: float = 1.0
    ema_decay: float = 0.98


CURVE_FIELDS = ["step", "L_gan", "L_con", "L_fm", "L_d"]


def _set_trainable(module: Module, flag: bool):
    for p in module.parameters():
        p.requires_grad = flag


def _stack(clips: list[AudioBuffer]) -> np.ndarray:
    n = min(len(c) for c in clips)
    return np.stack([c.samples[:n] for c in clips])


def train_evegan(clean: list[AudioBuffer], ssea: list[AudioBuffer], hyper: EveHyper = EveHyper(),
                 out_dir: str | Path | None = None, log=None):
    """Alternating discriminator / translator updates on unpaired clean and side-channel clips.

    Returns (translator, discriminator, curves). With `out_dir`, writes
    translator.ckpt, discriminator.ckpt and curves.csv there.
    """
    if not clean or not ssea:
        raise InvalidInputError("training needs both clean audio and side-channel samples")
    source_rate = clean[0].sample_rate
    sensor_rate = ssea[0].sample_rate
    if any(c.sample_rate != source_rate for c in clean) or any(s.sample_rate != sensor_rate for s in ssea):
        raise InvalidInputError("mixed sample rates in the training pools")
    rng = np.random.default_rng(hyper.seed)
    model = TranslatorModel(np.random.default_rng([hyper.seed, 1]), source_rate, sensor_rate, style_dim=hyper.style_dim)
    disc = EveDiscriminator(np.random.default_rng([hyper.seed, 2]))
    # the residual blocks start at identity and drift into distortions if they move as fast as the gains
    blocks = [p for k, p in model.named_parameters() if k.split(".")[0] in ("content", "bottleneck", "decoder")]
    block_ids = {id(p) for p in blocks}
    rest = [p for p in model.parameters() if id(p) not in block_ids]
    opt_t = Adam(rest, lr=hyper.lr, betas=(0.5, 0.999))
    opt_b = Adam(blocks, lr=hyper.lr * hyper.block_lr_scale, betas=(0.5, 0.999))
    opt_d = Adam(disc.parameters(), lr=hyper.lr * hyper.disc_lr_scale, betas=(0.5, 0.999))
    X, V = _stack(clean), _stack(ssea)
    # the returned translator is a moving average of the iterates, which damps the adversarial oscillation
    params = model.parameters()
    ema = [p.data.copy() for p in params]
    curves = []
    for step in range(hyper.steps):
        xb = Tensor(X[rng.integers(len(X), size=hyper.batch)])
        vb = Tensor(V[rng.integers(len(V), size=hyper.batch)])  # unpaired: drawn independently of x
        with no_grad():
            fake = model(xb, vb)
        real_probs, _ = disc(vb)
        objective, _ = gan_objective(real_probs, disc(fake)[0], hyper.non_saturating)
        loss_d = -objective
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        _set_trainable(disc, False)
        with no_grad():
            real_feats = disc.features(vb)  # after the update, so both sides see the same network
        fake = model(xb, vb)
        fake_probs, fake_feats = disc(fake)
        _, l_gan = gan_objective(None, fake_probs, hyper.non_saturating)
        l_fm = feature_matching_from(fake_feats, real_feats)
        l_con = consistency_loss(model, xb)
        loss_t = l_gan + hyper.beta_con * l_con + hyper.beta_fm * l_fm
        opt_t.zero_grad()
        opt_b.zero_grad()
        loss_t.backward()
        opt_t.step()
        opt_b.step()
        _set_trainable(disc, True)
        for e, p in zip(ema, params):
            e *= hyper.ema_decay
            e += (1.0 - hyper.ema_decay) * p.data

        row = {"step": step, "L_gan": l_gan.item(), "L_con": l_con.item(), "L_fm": l_fm.item(), "L_d": loss_d.item()}
        curves.append(row)
        if log:
            log(row)
    for e, p in zip(ema, params):
        p.data[...] = e
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"hyper": asdict(hyper), "source_rate": source_rate, "sensor_rate": sensor_rate}
        optim = {f"gains.{k}": v for k, v in opt_t.state_dict().items()}
        optim.update({f"blocks.{k}": v for k, v in opt_b.state_dict().items()})
        save_checkpoint(out / "translator.ckpt", model.state_dict(), optim, meta)
        save_checkpoint(out / "discriminator.ckpt", disc.state_dict(), opt_d.state_dict(), meta)
        write_curves(out / "curves.csv", curves, CURVE_FIELDS)
    return model, disc, curves


def write_curves(path: str | Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def load_translator(path: str | Path) -> TranslatorModel:
    from .nn.checkpoint import load_checkpoint

    tensors, _, meta = load_checkpoint(path)
    hyper = meta.get("hyper", {})
    model = TranslatorModel(np.random.default_rng(0), meta["source_rate"], meta["sensor_rate"],
                            style_dim=hyper.get("style_dim", 128))
    model.load_state_dict(tensors)
    return model


@dataclass(frozen=True)
class TranslationPair:
    audio: AudioBuffer  # clean source
    eavesdropped: AudioBuffer  # true side-channel capture of `audio`
    reference: AudioBuffer  # another capture from the same scenario


def evaluate_translation(model: TranslatorModel, pairs: list[TranslationPair], **ssim_kw) -> float:
    """Mean spectrogram SSIM between translated and true side-channel audio."""
    if not pairs:
        raise InvalidInputError("no test pairs")
    scores = [metrics.audio_ssim(p.eavesdropped, translate(model, p.audio, p.reference), **ssim_kw) for p in pairs]
    return float(np.mean(scores))


def make_translation_pairs(triples, per_scenario: int = 1, seed: int = 0) -> list[TranslationPair]:
    """Test pairs: each triple's clean/eavesdropped audio plus a reference from another clip of its scenario."""
    by_scenario: dict[int, list] = {}
    for t in triples:
        by_scenario.setdefault(t.scenario_index, []).append(t)
    rng = np.random.default_rng(seed)
    out = []
    for si in sorted(by_scenario):
        group = by_scenario[si]
        if len(group) < 2:
            raise InvalidInputError(f"scenario {si} needs at least two clips to pick a reference")
        for i in rng.permutation(len(group))[:per_scenario]:
            j = (i + 1 + int(rng.integers(len(group) - 1))) % len(group)
            out.append(TranslationPair(group[i].audio, group[i].eavesdropped, group[j].eavesdropped))
    return out


def oracle_log_gains(chan, sample_rate: int) -> np.ndarray:
    """Natural-log channel gain at each filterbank band centre (for diagnostics)."""
    freqs = np.arange(N_BANDS) * sample_rate / FRAME
    return chan.gain_db(np.maximum(freqs, 1.0)) * math.log(10) / 20
