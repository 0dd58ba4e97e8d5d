"""Toy speech models: spoken-digit corpus, digit classifier, CTC recognizer, enhancer."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, features
from .dsp import AudioBuffer
from .errors import InvalidInputError
from .nn import Adam, Conv1d, Linear, Module, Tensor, concat, no_grad
from .nn import functional as F

DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
ALPHABET = "abcdefghijklmnopqrstuvwxyz"
BLANK = 0
N_SYMBOLS = len(ALPHABET) + 1


def encode_text(text: str) -> list[int]:
    out = []
    for ch in text.lower():
        if ch not in ALPHABET:
            raise InvalidInputError(f"character {ch!r} outside the a-z alphabet")
        out.append(ALPHABET.index(ch) + 1)
    return out


def decode_tokens(tokens) -> str:
    return "".join(ALPHABET[t - 1] for t in tokens if t != BLANK)


# ------------------------------------------------------------- synthesis

# phone -> (kind, formants or noise band). Formant tuples give start and end targets.
_PHONES = {
    "ih": ("vowel", (400, 1900, 2550)),
    "iy": ("vowel", (280, 2250, 2900)),
    "eh": ("vowel", (550, 1770, 2490)),
    "ey": ("vowel", (480, 2000, 2600), (320, 2250, 2700)),
    "ah": ("vowel", (640, 1200, 2400)),
    "ao": ("vowel", (570, 840, 2410)),
    "ow": ("vowel", (500, 900, 2400), (380, 780, 2350)),
    "uw": ("vowel", (320, 950, 2400)),
    "ay": ("vowel", (700, 1200, 2500), (350, 2150, 2750)),
    "r": ("liquid", (450, 1200, 1650)),
    "w": ("liquid", (300, 700, 2200)),
    "n": ("nasal", (250, 1450, 2500)),
    "z": ("voiced_fric", (4000, 7000)),
    "v": ("voiced_fric", (1500, 6000)),
    "s": ("fric", (4000, 7800)),
    "f": ("fric", (1500, 7500)),
    "th": ("fric", (1500, 7500)),
    "t": ("stop", (3000, 6500)),
    "k": ("stop", (1500, 3200)),
}

_LEXICON = {
    "zero": ("z", "ih", "r", "ow"),
    "one": ("w", "ah", "n"),
    "two": ("t", "uw"),
    "three": ("th", "r", "iy"),
    "four": ("f", "ao", "r"),
    "five": ("f", "ay", "v"),
    "six": ("s", "ih", "k", "s"),
    "seven": ("s", "eh", "v", "ah", "n"),
    "eight": ("ey", "t"),
    "nine": ("n", "ay", "n"),
}

_DURATION_MS = {"vowel": 150, "liquid": 70, "nasal": 80, "voiced_fric": 90, "fric": 100, "stop": 70}
_VOICED_GAIN = {"vowel": 1.0, "liquid": 0.55, "nasal": 0.35, "voiced_fric": 0.25}
_NOISE_GAIN = {"voiced_fric": 0.06, "fric": 0.1, "stop": 0.15}


@dataclass(frozen=True)
class Speaker:
    f0: float
    formant_scale: float
    rate: float
    breath: float

    @staticmethod
    def random(rng: np.random.Generator) -> "Speaker":
        return Speaker(
            f0=float(rng.uniform(95, 230)),
            formant_scale=float(rng.uniform(0.9, 1.12)),
            rate=float(rng.uniform(0.85, 1.15)),
            breath=float(rng.uniform(0.0, 0.02)),
        )


def _resonator_gain(f: np.ndarray, fc: np.ndarray, bw: float) -> np.ndarray:
    r = f / fc
    return 1.0 / np.sqrt((1 - r * r) ** 2 + (f * bw / (fc * fc)) ** 2)


def _smooth(track: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return track
    k = np.hanning(width + 2)[1:-1]
    k /= k.sum()
    pad = width // 2
    return np.convolve(np.pad(track, (pad, width - 1 - pad), mode="edge"), k, mode="valid")


def synthesize_word(word: str, speaker: Speaker, rng: np.random.Generator, sample_rate: int = 16000,
                    duration: float = 0.5) -> AudioBuffer:
    """Formant-style synthetic utterance of `word`, placed at a random onset inside `duration` seconds."""
    if word not in _LEXICON:
        raise InvalidInputError(f"no pronunciation for {word!r}")
    n = int(round(duration * sample_rate))
    phones = _LEXICON[word]
    lens = []
    for p in phones:
        kind = _PHONES[p][0]
        ms = _DURATION_MS[kind] * rng.uniform(0.85, 1.15) / speaker.rate
        lens.append(max(1, int(ms * sample_rate / 1000)))
    margin = int(0.02 * sample_rate)
    total = sum(lens)
    if total > n - 2 * margin:
        scale = (n - 2 * margin) / total
        lens = [max(1, int(L * scale)) for L in lens]
        total = sum(lens)
    onset = int(rng.integers(margin, n - total - margin + 1))

    formants = np.zeros((3, n))
    voiced = np.zeros(n)
    noise_amp = np.zeros(n)
    noise = np.zeros(n)
    pos = onset
    prev_f = None
    for p, L in zip(phones, lens):
        info = _PHONES[p]
        kind = info[0]
        seg = slice(pos, pos + L)
        if kind in ("vowel", "liquid", "nasal"):
            start = np.array(info[1], dtype=float)
            end = np.array(info[2] if len(info) > 2 else info[1], dtype=float)
            t = np.linspace(0.0, 1.0, L)
            formants[:, seg] = (start[:, None] * (1 - t) + end[:, None] * t) * speaker.formant_scale
            prev_f = end * speaker.formant_scale
        else:
            fill = prev_f if prev_f is not None else np.array([500.0, 1500.0, 2500.0]) * speaker.formant_scale
            formants[:, seg] = fill[:, None]
        voiced[seg] = _VOICED_GAIN.get(kind, 0.0)
        if kind in _NOISE_GAIN:
            lo, hi = info[1]
            m = L if kind != "stop" else max(1, L // 3)
            off = 0 if kind != "stop" else L - m
            white = rng.standard_normal(m)
            spec = np.fft.rfft(white)
            fr = np.fft.rfftfreq(m, 1.0 / sample_rate)
            spec[(fr < lo) | (fr > min(hi, 0.48 * sample_rate))] = 0.0
            band = np.fft.irfft(spec, m)
            band /= band.std() + 1e-12
            noise[pos + off : pos + off + m] += band
            noise_amp[pos + off : pos + off + m] = _NOISE_GAIN[kind]
        pos += L
    # unvoiced stretches before the first vowel borrow the first formant target
    first = np.argmax(formants[0] > 0)
    formants[:, :first] = formants[:, first : first + 1]
    last = n - np.argmax(formants[0, ::-1] > 0) - 1
    formants[:, last + 1 :] = formants[:, last : last + 1]

    w = int(0.015 * sample_rate)
    formants = np.stack([_smooth(f, w) for f in formants])
    voiced = _smooth(voiced, w)
    noise_amp = _smooth(noise_amp, max(1, w // 3))

    t = np.arange(n) / sample_rate
    f0 = speaker.f0 * (1.08 - 0.16 * t / duration) * (1 + 0.01 * np.sin(2 * np.pi * 5.5 * t))
    f0 *= np.exp(0.02 * _smooth(rng.standard_normal(n), int(0.05 * sample_rate)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(0.45 * sample_rate / speaker.f0 / 0.9)
    h = np.arange(1, n_harm + 1)[:, None]
    # spectral envelope changes slowly: evaluate every `step` samples and hold
    step = 8
    fh = h * f0[None, ::step]
    env = 1.0 / h  # glottal roll-off
    for k, bw in enumerate((80.0, 100.0, 130.0)):
        env = env * _resonator_gain(fh, formants[k][None, ::step], bw)
    env = np.repeat(env * (fh < 0.46 * sample_rate), step, axis=1)[:, :n]
    harmonic = (env * np.sin(h * phase[None, :])).sum(axis=0)
    harmonic /= np.abs(harmonic).max() + 1e-12
    x = voiced * harmonic + noise_amp * noise + speaker.breath * voiced * rng.standard_normal(n)
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.3, 0.6)
    return AudioBuffer(x, sample_rate)


@dataclass(frozen=True)
class Utterance:
    audio: AudioBuffer
    label: int
    transcript: str
    speaker: int
    split: str


def synthesize_digit_corpus(n_per_digit: int, seed: int, sample_rate: int = 16000, duration: float = 0.5,
                            n_speakers: int = 16, splits: dict | None = None) -> list[Utterance]:
    """Balanced synthetic spoken-digit corpus.

    `splits` maps split name -> fraction; each digit's utterances are assigned
    round-robin in that proportion so every split stays class-balanced.
    """
    if n_per_digit < 1:
        raise InvalidInputError("n_per_digit must be positive")
    splits = splits or {"train": 1.0}
    rng = np.random.default_rng(seed)
    speakers = [Speaker.random(rng) for _ in range(n_speakers)]
    names = list(splits)
    weights = np.array([splits[k] for k in names], dtype=float)
    weights /= weights.sum()
    counts = np.floor(weights * n_per_digit).astype(int)
    counts[0] += n_per_digit - counts.sum()
    pattern = [name for name, c in zip(names, counts) for _ in range(c)]
    out = []
    for d, word in enumerate(DIGIT_WORDS):
        for i in range(n_per_digit):
            spk = int(rng.integers(n_speakers))
            audio = synthesize_word(word, speakers[spk], rng, sample_rate, duration)
            out.append(Utterance(audio, d, word, spk, pattern[i]))
    return out


def write_corpus(utts: list[Utterance], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "transcript", "split", "speaker_id"])
        for i, u in enumerate(utts):
            name = f"utt_{i:05d}.wav"
            dsp.write_wav(out_dir / name, u.audio, "FLOAT")
            w.writerow([name, u.label, u.transcript, u.split, u.speaker])
    return manifest


def load_corpus(manifest: str | Path, duration: float | None = 0.5) -> list[Utterance]:
    """Load a corpus manifest (path, label, transcript, split, speaker_id); clips are padded/cropped to `duration`."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise InvalidInputError(f"corpus manifest not found: {manifest}")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            audio = dsp.read_wav(manifest.parent / row["path"])
            if duration is not None:
                n = int(round(duration * audio.sample_rate))
                x = audio.samples[:n]
                audio = audio.with_samples(np.pad(x, (0, n - len(x))))
            out.append(Utterance(audio, int(row["label"]), row["transcript"], int(row["speaker_id"]), row["split"]))
    if not out:
        raise InvalidInputError("corpus manifest lists no utterances")
    return out


# -------------------------------------------------------------------- CTC


def _logsumexp(*xs):
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def ctc_forward_backward_batch(logprobs: np.ndarray, targets: list[list[int]], blank: int = BLANK):
    """Batched CTC: negative log-likelihoods [B] and gradients w.r.t. `logprobs` [B, T, C].

    Items with no alignment that fits in T frames get +inf and a zero gradient.
    """
    B, T, C = logprobs.shape
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), blank)
    lengths = np.array([2 * len(t) + 1 for t in targets])
    for b, tgt in enumerate(targets):
        if tgt:
            ext[b, 1 : 2 * len(tgt) : 2] = tgt
    valid = np.arange(S)[None, :] < lengths[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    ninf = -np.inf
    emit = np.take_along_axis(logprobs, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, ninf)
    col = np.full((B, 1), ninf)

    alpha = np.full((B, T, S), ninf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        a = alpha[:, t - 1]
        step = np.concatenate([col, a[:, :-1]], axis=1)
        jump = np.where(skip, np.concatenate([col, col, a[:, :-2]], axis=1)[:, :S], ninf)
        alpha[:, t] = _logsumexp(a, step, jump) + emit[:, t]

    rows = np.arange(B)
    last, prev = lengths - 1, np.maximum(lengths - 2, 0)
    beta = np.full((B, T, S), ninf)
    beta[rows, -1, last] = emit[rows, -1, last]
    has_prev = lengths > 1
    beta[rows[has_prev], -1, prev[has_prev]] = emit[rows[has_prev], -1, prev[has_prev]]
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        b = beta[:, t + 1]
        step = np.concatenate([b[:, 1:], col], axis=1)
        jump = np.where(skip_next, np.concatenate([b[:, 2:], col, col], axis=1)[:, :S], ninf)
        beta[:, t] = _logsumexp(b, step, jump) + emit[:, t]

    end_a = alpha[rows, -1, last]
    end_b = np.where(has_prev, alpha[rows, -1, prev], ninf)
    log_p = _logsumexp(end_a, end_b)
    ok = np.isfinite(log_p)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - emit - np.where(ok, log_p, 0.0)[:, None, None])
    post = np.where(ok[:, None, None] & np.isfinite(post), post, 0.0)
    grad = np.zeros_like(logprobs)
    for b in range(B):
        np.add.at(grad[b].T, ext[b, : lengths[b]], -post[b, :, : lengths[b]].T)
    return np.where(ok, -log_p, np.inf), grad


def ctc_forward_backward(logprobs: np.ndarray, target: list[int], blank: int = BLANK):
    """Negative log-likelihood and its gradient w.r.t. `logprobs` [T, C]; +inf when no alignment fits."""
    nll, grad = ctc_forward_backward_batch(np.asarray(logprobs)[None], [list(target)], blank)
    return float(nll[0]), grad[0]


def ctc_min_frames(target: list[int]) -> int:
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(logprobs: Tensor, targets, reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood; `logprobs` is [T, C] with one target or [B, T, C] with a list of targets."""
    single = logprobs.ndim == 2
    lp = logprobs.data[None] if single else logprobs.data
    tgts = [list(targets)] if single else [list(t) for t in targets]
    if len(tgts) != lp.shape[0]:
        raise InvalidInputError("one target sequence per batch item is required")
    for tgt in tgts:
        if ctc_min_frames(tgt) > lp.shape[1]:
            raise InvalidInputError(f"target of length {len(tgt)} needs more than {lp.shape[1]} frames")
    nll, grads = ctc_forward_backward_batch(lp, tgts)
    total = float(nll.sum())
    scale = 1.0 / len(tgts) if reduction == "mean" else 1.0
    grads = grads * scale
    if single:
        grads = grads[0]
    return Tensor.from_op(np.array(total * scale), (logprobs,), lambda g: (g * grads,))


def greedy_decode(logprobs: np.ndarray) -> list[int]:
    best = np.asarray(logprobs).argmax(axis=-1)
    out, prev = [], None
    for t in best:
        if t != prev and t != BLANK:
            out.append(int(t))
        prev = t
    return out


# ------------------------------------------------------------------ models


@dataclass(frozen=True)
class FrontEnd:
    sample_rate: int = 8000
    fft_size: int = 256
    hop: int = 64
    n_mels: int = 32

    def __call__(self, x: Tensor) -> Tensor:
        return features.normalized_log_mel(x, self.sample_rate, self.fft_size, self.hop, self.n_mels)

    def check(self, x: Tensor):
        if x.ndim != 2:
            raise InvalidInputError("expected a batch of waveforms [B, n]")


class DigitClassifier(Module):
    def __init__(self, rng: np.random.Generator, width: int = 32, kernel: int = 5, front: FrontEnd = FrontEnd()):
        self.front = front
        self.width = width
        self.kernel = kernel
        self.c1 = Conv1d(front.n_mels, width, kernel, rng)
        self.c2 = Conv1d(width, width, kernel, rng, stride=2)
        self.c3 = Conv1d(width, width, kernel, rng, stride=2)
        self.head = Linear(2 * width, len(DIGIT_WORDS), rng, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        """Waveforms [B, n] -> class log-probabilities [B, 10]."""
        h = self.front(x)
        h = self.c1(h).leaky_relu(0.1)
        h = self.c2(h).leaky_relu(0.1)
        h = self.c3(h).leaky_relu(0.1)
        pooled = concat([h.mean(axis=-1), h.max(axis=-1)], axis=1)
        return F.log_softmax(self.head(pooled), axis=-1)


class CtcRecognizer(Module):
    def __init__(self, rng: np.random.Generator, width: int = 48, front: FrontEnd = FrontEnd()):
        self.front = front
        self.width = width
        self.inp = Conv1d(front.n_mels, width, 5, rng)
        self.blocks = [Conv1d(width, width, 3, rng, dilation=d) for d in (1, 2, 4, 8, 16)]
        self.context = Linear(width, width, rng)
        self.out = Conv1d(width, N_SYMBOLS, 1, rng, gain=0.1)

    def forward(self, x: Tensor) -> Tensor:
        """Waveforms [B, n] -> per-frame log-probabilities [B, T, 27]."""
        h = self.inp(self.front(x)).leaky_relu(0.1)
        for blk in self.blocks:
            h = h + blk(h).leaky_relu(0.1)
        ctx = self.context(h.mean(axis=-1)).tanh()
        h = h + ctx.reshape(*ctx.shape, 1)
        return F.log_softmax(self.out(h).transpose(0, 2, 1), axis=-1)

    def transcribe(self, audio: list[AudioBuffer]) -> list[str]:
        with no_grad():
            lp = self(batch_audio(audio)).data
        return [decode_tokens(greedy_decode(row)) for row in lp]


class Enhancer(Module):
    """Sensor-rate audio -> 16 kHz estimate of the clean source."""

    def __init__(self, rng: np.random.Generator, width: int = 16, input_rate: int = 8000, output_rate: int = 16000):
        self.input_rate = input_rate
        self.output_rate = output_rate
        self.c1 = Conv1d(1, width, 9, rng)
        self.c2 = Conv1d(width, width, 9, rng, dilation=2)
        self.c3 = Conv1d(width, 1, 9, rng, gain=0.1)
        self.log_gain = Tensor(np.array([math.log(0.1)]), requires_grad=True, name="param")

    def forward(self, x: Tensor) -> Tensor:
        up = features.resample_tensor(x, self.input_rate, self.output_rate)
        rms = ((up * up).mean(axis=-1, keepdims=True) + 1e-12).sqrt()
        u = (up / rms).reshape(up.shape[0], 1, up.shape[1])
        h = self.c2(self.c1(u).leaky_relu(0.1)).leaky_relu(0.1)
        y = u + self.c3(h)
        return y.reshape(up.shape) * self.log_gain.exp()

    def enhance(self, audio: AudioBuffer) -> AudioBuffer:
        if audio.sample_rate != self.input_rate:
            raise InvalidInputError(f"enhancer expects {self.input_rate} Hz input")
        with no_grad():
            y = self(Tensor(audio.samples[None])).data[0]
        return AudioBuffer(np.clip(y, -1.0, 1.0), self.output_rate)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainHyper:
    steps: int = 400
    batch: int = 32
    lr: float = 3e-3
    seed: int = 0


def batch_audio(audio: list[AudioBuffer]) -> Tensor:
    n = min(len(a) for a in audio)
    return Tensor(np.stack([a.samples[:n] for a in audio]))


def _check_labeled(data, n_classes: int | None = None):
    if not data:
        raise InvalidInputError("training set is empty")
    if n_classes:
        counts = np.bincount([lab for _, lab in data], minlength=n_classes)
        if counts.min() == 0 or counts.max() > 3 * counts.min():
            raise InvalidInputError(f"training set is class-imbalanced: counts {counts.tolist()}")


def _batches(n: int, hyper: TrainHyper):
    rng = np.random.default_rng(hyper.seed)
    order = np.array([], dtype=int)
    for _ in range(hyper.steps):
        if len(order) < hyper.batch:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[: hyper.batch], order[hyper.batch :]
        yield idx


def train_classifier(data: list[tuple[AudioBuffer, int]], hyper: TrainHyper = TrainHyper(), width: int = 32,
                     kernel: int = 5, front: FrontEnd = FrontEnd(), log=None) -> DigitClassifier:
    _check_labeled(data, len(DIGIT_WORDS))
    model = DigitClassifier(np.random.default_rng(hyper.seed), width, kernel, front)
    opt = Adam(model.parameters(), lr=hyper.lr)
    X = batch_audio([a for a, _ in data]).data
    y = np.array([lab for _, lab in data])
    for step, idx in enumerate(_batches(len(data), hyper)):
        lp = model(Tensor(X[idx]))
        loss = -(lp[np.arange(len(idx)), y[idx]]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log:
            log(step, loss.item())
    return model


def train_recognizer(data: list[tuple[AudioBuffer, str]], hyper: TrainHyper = TrainHyper(), width: int = 48,
                     front: FrontEnd = FrontEnd(), log=None) -> CtcRecognizer:
    if not data:
        raise InvalidInputError("training set is empty")
    model = CtcRecognizer(np.random.default_rng(hyper.seed), width, front)
    opt = Adam(model.parameters(), lr=hyper.lr)
    X = batch_audio([a for a, _ in data]).data
    targets = [encode_text(t) for _, t in data]
    for step, idx in enumerate(_batches(len(data), hyper)):
        lp = model(Tensor(X[idx]))
        loss = ctc_loss(lp, [targets[i] for i in idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log:
            log(step, loss.item())
    return model


def mr_stft_loss(pred: Tensor, target: Tensor, resolutions=((512, 128), (1024, 256), (2048, 512))) -> Tensor:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions that fit the signal."""
    total = None
    used = 0
    for fft_size, hop in resolutions:
        if pred.shape[-1] < fft_size:
            continue
        mp = features.stft_magnitude(pred, fft_size, hop)
        mt = features.stft_magnitude(target, fft_size, hop)
        d = mp - mt
        sc = (d * d).sum().sqrt() / ((mt * mt).sum().sqrt() + 1e-12)
        lm = (mp.log() - mt.log()).abs().mean()
        term = sc + lm
        total = term if total is None else total + term
        used += 1
    if used == 0:
        raise InvalidInputError("signal shorter than every STFT resolution")
    return total * (1.0 / used)


def train_enhancer(pairs: list[tuple[AudioBuffer, AudioBuffer]], hyper: TrainHyper = TrainHyper(batch=8), width: int = 16,
                   log=None) -> Enhancer:
    """pairs: (eavesdropped at sensor rate, clean at 16 kHz)."""
    if not pairs:
        raise InvalidInputError("training set is empty")
    rate_in = pairs[0][0].sample_rate
    rate_out = pairs[0][1].sample_rate
    model = Enhancer(np.random.default_rng(hyper.seed), width, rate_in, rate_out)
    opt = Adam(model.parameters(), lr=hyper.lr)
    X = batch_audio([p[0] for p in pairs]).data
    Y = batch_audio([p[1] for p in pairs]).data
    for step, idx in enumerate(_batches(len(pairs), hyper)):
        pred = model(Tensor(X[idx]))
        n = min(pred.shape[-1], Y.shape[-1])
        pred = pred[:, :n]
        tgt = Tensor(Y[idx, :n])
        loss = F.l1(pred, tgt) + mr_stft_loss(pred, tgt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log:
            log(step, loss.item())
    return model


# ---------------------------------------------------------------- inference


def predict_digits(classifier: DigitClassifier, audio: list[AudioBuffer], batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(audio), batch):
            out.append(classifier(batch_audio(audio[s : s + batch])).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.array([], dtype=int)


def ddr(classifier_or_predictions, dataset) -> float:
    """Digit detection rate: top-1 accuracy.

    Accepts a classifier with a list of (audio, label) pairs, or an array of
    predicted labels with an array of true labels.
    """
    if isinstance(classifier_or_predictions, Module):
        audio = [a for a, _ in dataset]
        labels = np.array([lab for _, lab in dataset])
        preds = predict_digits(classifier_or_predictions, audio)
    else:
        preds = np.asarray(classifier_or_predictions)
        labels = np.asarray(dataset)
    if len(labels) == 0:
        raise InvalidInputError("cannot score an empty dataset")
    return float(np.mean(preds == labels))
