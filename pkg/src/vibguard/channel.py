"""Simulated vibration side channels.

A channel resamples audio to the sensor rate, shapes its spectrum with a
piecewise-linear (in log-frequency) gain curve, and adds white Gaussian noise.
Scenario parameters shift the whole curve by a dB offset.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioBuffer
from .errors import InvalidInputError

SENSORS = ("mmwave", "accelerometer", "optical")


@dataclass(frozen=True)
class SensorProfile:
    anchors: tuple  # ((hz, db), ...) ascending in hz
    noise_floor_db: float
    sensor_rate: int
    reference_distance: float = 0.25  # distance product giving 0 dB offset

    def __post_init__(self):
        a = tuple((float(f), float(g)) for f, g in self.anchors)
        if not a:
            raise InvalidInputError("a sensor profile needs at least one anchor")
        if any(f <= 0 for f, _ in a) or any(a[i][0] >= a[i + 1][0] for i in range(len(a) - 1)):
            raise InvalidInputError("anchor frequencies must be positive and strictly ascending")
        if not self.noise_floor_db < 0:
            raise InvalidInputError("noise floor must be below 0 dBFS")
        if self.sensor_rate <= 0 or self.reference_distance <= 0:
            raise InvalidInputError("sensor rate and reference distance must be positive")
        object.__setattr__(self, "anchors", a)


# Noise floor sits 80 dB below full scale. The mmWave curve is flat to 1 kHz
# and reaches the floor (full-scale tone SNR about 0 dB) by 2 kHz.
DEFAULT_PROFILES = {
    "mmwave": SensorProfile(((20, 0.0), (1000, 0.0), (2000, -76.0), (4000, -80.0)), -80.0, 8000),
    "accelerometer": SensorProfile(((20, 0.0), (150, 0.0), (240, -60.0)), -80.0, 500, 1.0),
    "optical": SensorProfile(((20, -6.0), (1000, -6.0), (2000, -82.0), (4000, -86.0)), -80.0, 8000, 0.025),
}

DEFAULT_MATERIALS = {
    "tinfoil": 0.0,
    "chip_bag": -2.0,
    "plastic": -3.0,
    "carton": -4.0,
    "paper": -5.0,
    "cotton": -8.0,
}

REFERENCE_VOLUME = 80.0
MIN_COS = 0.05


@dataclass(frozen=True)
class ScenarioVector:
    sensor: str = "mmwave"
    distance_source_to_object: float = 0.5
    distance_sensor_to_object: float = 0.5
    angle: float = 0.0
    material: str = "tinfoil"
    volume: float = 80.0
    sensor_rate: int | None = None  # None -> sensor default

    def __post_init__(self):
        if self.sensor not in SENSORS:
            raise InvalidInputError(f"unknown sensor {self.sensor!r}; expected one of {SENSORS}")
        if self.distance_source_to_object <= 0 or self.distance_sensor_to_object <= 0:
            raise InvalidInputError("distances must be positive")
        if not 50 <= self.volume <= 100:
            raise InvalidInputError(f"volume {self.volume} dB outside [50, 100]")
        if self.sensor_rate is not None and self.sensor_rate <= 0:
            raise InvalidInputError("sensor rate must be positive")

    def as_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChannelModel:
    anchors: tuple  # ((hz, db), ...)
    noise_floor_db: float
    sensor_rate: int

    def __post_init__(self):
        a = tuple((float(f), float(g)) for f, g in self.anchors)
        if not a or any(f <= 0 for f, _ in a):
            raise InvalidInputError("anchors need positive frequencies")
        if not self.noise_floor_db < 0:
            raise InvalidInputError("noise floor must be negative (dBFS)")
        if self.sensor_rate <= 0:
            raise InvalidInputError("sensor rate must be positive")
        object.__setattr__(self, "anchors", a)

    def gain_db(self, freqs) -> np.ndarray:
        """Gain curve: linear in log-frequency between anchors, held flat outside them."""
        f = np.maximum(np.asarray(freqs, dtype=float), 1e-3)
        hz = np.array([p[0] for p in self.anchors])
        db = np.array([p[1] for p in self.anchors])
        return np.interp(np.log(f), np.log(hz), db)

    @staticmethod
    def identity(sample_rate: int) -> "ChannelModel":
        return ChannelModel(((1.0, 0.0),), -math.inf, sample_rate)


def scenario_offset_db(zeta: ScenarioVector, materials: dict = DEFAULT_MATERIALS,
                       profiles: dict = DEFAULT_PROFILES) -> float:
    if zeta.material not in materials:
        raise InvalidInputError(f"unknown material {zeta.material!r}")
    prof = profiles[zeta.sensor]
    distance = -20.0 * math.log10(zeta.distance_source_to_object * zeta.distance_sensor_to_object / prof.reference_distance)
    angle = 20.0 * math.log10(max(math.cos(math.radians(zeta.angle)), MIN_COS))
    return materials[zeta.material] + (zeta.volume - REFERENCE_VOLUME) + distance + angle


def build_channel(zeta: ScenarioVector, profiles: dict = DEFAULT_PROFILES,
                  materials: dict = DEFAULT_MATERIALS) -> ChannelModel:
    prof = profiles[zeta.sensor]
    off = scenario_offset_db(zeta, materials, profiles)
    rate = zeta.sensor_rate or prof.sensor_rate
    anchors = tuple((f, g + off) for f, g in prof.anchors)
    return ChannelModel(anchors, prof.noise_floor_db, rate)


def apply_channel(audio: AudioBuffer, chan: ChannelModel, seed: int | None = 0, noise: bool = True) -> AudioBuffer:
    """Resample to the sensor rate, shape the spectrum, then add sensor noise."""
    y = dsp.resample(audio, chan.sensor_rate).samples
    n = len(y)
    if n == 0:
        return AudioBuffer(y, chan.sensor_rate)
    spec = np.fft.rfft(y)
    gains = 10.0 ** (chan.gain_db(np.fft.rfftfreq(n, 1.0 / chan.sensor_rate)) / 20.0)
    y = np.fft.irfft(spec * gains, n)
    if noise and math.isfinite(chan.noise_floor_db):
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, 10.0 ** (chan.noise_floor_db / 20.0), n)
    return AudioBuffer(y, chan.sensor_rate)


def probe_frequency_response(chan: ChannelModel, freqs=None, source_rate: int = 16000, duration: float = 4.0,
                             band_fraction: float = 1 / 96) -> tuple[np.ndarray, np.ndarray]:
    """Measure the channel gain (dB) with a noiseless log sweep.

    Returns (freqs, gain_db). Each gain is the median per-bin output/input
    power ratio in a narrow band around the probe frequency, where the input
    is the sweep resampled to the sensor rate.
    """
    nyq = min(source_rate, chan.sensor_rate) / 2
    f_lo, f_hi = 10.0, 0.95 * nyq
    if freqs is None:
        freqs = np.geomspace(2 * f_lo, 0.9 * f_hi, 48)
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs <= f_lo) or np.any(freqs >= f_hi):
        raise InvalidInputError(f"probe frequencies must lie in ({f_lo}, {f_hi:.0f}) Hz")
    sweep = dsp.sweep_tone(f_lo, f_hi, duration, source_rate)
    out = apply_channel(sweep, chan, noise=False).samples
    ref = dsp.resample(sweep, chan.sensor_rate).samples
    fb = np.fft.rfftfreq(len(out), 1.0 / chan.sensor_rate)
    po = np.abs(np.fft.rfft(out)) ** 2
    pr = np.abs(np.fft.rfft(ref)) ** 2
    ratio_db = 10 * np.log10(np.maximum(po, 1e-300) / np.maximum(pr, 1e-300))
    gains = np.empty(len(freqs))
    for i, f in enumerate(freqs):
        band = (fb >= f * 2 ** (-band_fraction)) & (fb <= f * 2 ** band_fraction)
        if not band.any():
            band = np.abs(fb - f) == np.abs(fb - f).min()
        gains[i] = float(np.median(ratio_db[band]))
    return freqs, gains


def tone_snr_db(chan: ChannelModel, freq: float, amplitude: float = 1.0) -> float:
    """Expected SNR of a sinusoid after the channel: tone power times gain over noise power."""
    return float(chan.gain_db(freq) + 10 * math.log10(amplitude ** 2 / 2) - chan.noise_floor_db)


# ------------------------------------------------------------------ grids


def scenario_grid(**axes) -> list[ScenarioVector]:
    """Cartesian product of the given ScenarioVector fields (each a list of values)."""
    names = [f.name for f in fields(ScenarioVector)]
    for k in axes:
        if k not in names:
            raise InvalidInputError(f"unknown scenario field {k!r}")
    keys = list(axes)
    return [ScenarioVector(**dict(zip(keys, combo))) for combo in itertools.product(*(axes[k] for k in keys))]


def mmwave_base_grid() -> list[ScenarioVector]:
    """3 materials x 2 x 2 distances x 3 angles x 2 volumes = 72 mmWave scenarios."""
    return scenario_grid(
        sensor=["mmwave"],
        material=["tinfoil", "chip_bag", "carton"],
        distance_source_to_object=[0.5, 1.5],
        distance_sensor_to_object=[0.5, 1.5],
        angle=[-15.0, 0.0, 15.0],
        volume=[70.0, 80.0],
    )


def optical_base_grid() -> list[ScenarioVector]:
    return scenario_grid(
        sensor=["optical"],
        distance_source_to_object=[0.5, 1.0, 1.5],
        distance_sensor_to_object=[0.05, 0.1, 0.15],
        material=["tinfoil", "chip_bag"],
        volume=[70.0, 80.0],
    )


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Triple:
    audio: AudioBuffer
    eavesdropped: AudioBuffer
    zeta: ScenarioVector
    seed: int
    audio_index: int = 0
    scenario_index: int = 0


def triple_seed(seed: int, scenario_index: int, audio_index: int) -> int:
    """Per-triple seed, independent of processing order."""
    return int(np.random.SeedSequence([seed, scenario_index, audio_index]).generate_state(1)[0])


def synthesize_scenario_grid(base: list[ScenarioVector], audio_corpus: list[AudioBuffer], seed: int,
                             samples_per_scenario: int | None = None, profiles: dict = DEFAULT_PROFILES,
                             materials: dict = DEFAULT_MATERIALS) -> list[Triple]:
    """Pass corpus clips through every scenario.

    With `samples_per_scenario`, each scenario gets that many clips drawn
    without replacement (deterministically from `seed`).
    """
    if not base:
        raise InvalidInputError("scenario grid is empty")
    if not audio_corpus:
        raise InvalidInputError("audio corpus is empty")
    out = []
    for si, zeta in enumerate(base):
        chan = build_channel(zeta, profiles, materials)
        if samples_per_scenario is None or samples_per_scenario >= len(audio_corpus):
            idx = range(len(audio_corpus))
        else:
            rng = np.random.default_rng([seed, si])
            idx = sorted(rng.choice(len(audio_corpus), samples_per_scenario, replace=False).tolist())
        for ai in idx:
            s = triple_seed(seed, si, ai)
            out.append(Triple(audio_corpus[ai], apply_channel(audio_corpus[ai], chan, s), zeta, s, ai, si))
    return out


MANIFEST_FIELDS = ["scenario", "clean_path", "eavesdropped_path", "seed", "audio_index"] + [f.name for f in fields(ScenarioVector)]


def write_dataset(triples: list[Triple], out_dir: str | Path) -> Path:
    """One directory per scenario holding clean/eavesdropped WAV pairs, plus manifest.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in triples:
        sdir = out_dir / f"scenario_{t.scenario_index:03d}"
        sdir.mkdir(exist_ok=True)
        clean = sdir / f"clip_{t.audio_index:04d}_clean.wav"
        eaves = sdir / f"clip_{t.audio_index:04d}_eavesdropped.wav"
        dsp.write_wav(clean, t.audio, "FLOAT")
        dsp.write_wav(eaves, t.eavesdropped, "FLOAT")
        row = {"scenario": t.scenario_index, "clean_path": str(clean.relative_to(out_dir)),
               "eavesdropped_path": str(eaves.relative_to(out_dir)), "seed": t.seed, "audio_index": t.audio_index}
        row.update({k: ("" if v is None else v) for k, v in t.zeta.as_row().items()})
        rows.append(row)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return manifest


def _zeta_from_row(row: dict) -> ScenarioVector:
    return ScenarioVector(
        sensor=row["sensor"],
        distance_source_to_object=float(row["distance_source_to_object"]),
        distance_sensor_to_object=float(row["distance_sensor_to_object"]),
        angle=float(row["angle"]),
        material=row["material"],
        volume=float(row["volume"]),
        sensor_rate=int(row["sensor_rate"]) if row.get("sensor_rate") else None,
    )


def load_dataset(directory: str | Path) -> list[Triple]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise InvalidInputError(f"no manifest.csv in {directory}")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Triple(
                dsp.read_wav(directory / row["clean_path"]),
                dsp.read_wav(directory / row["eavesdropped_path"]),
                _zeta_from_row(row),
                int(row["seed"]),
                int(row["audio_index"]),
                int(row["scenario"]),
            ))
    return out


def profiles_from_config(sensors: dict | None = None) -> dict:
    """Override default profiles from a mapping like {'mmwave': {'anchors': [[hz, db], ...], ...}}."""
    out = dict(DEFAULT_PROFILES)
    for name, spec in (sensors or {}).items():
        if name not in SENSORS:
            raise InvalidInputError(f"unknown sensor {name!r} in channel config")
        out[name] = replace(out[name], **{k: (tuple(map(tuple, v)) if k == "anchors" else v) for k, v in spec.items()})
    return out


__all__ = [
    "ChannelModel", "DEFAULT_MATERIALS", "DEFAULT_PROFILES", "SENSORS", "ScenarioVector", "SensorProfile", "Triple",
    "apply_channel", "build_channel", "load_dataset", "mmwave_base_grid", "optical_base_grid",
    "probe_frequency_response", "profiles_from_config", "scenario_grid", "scenario_offset_db",
    "synthesize_scenario_grid", "tone_snr_db", "triple_seed", "write_dataset",
]
