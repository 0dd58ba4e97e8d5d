"""Experiment configuration: nested dataclasses loaded from YAML, strict about keys."""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .errors import InvalidInputError


@dataclass(frozen=True)
class PathSettings:
    corpus: str | None = None  # manifest.csv of an external corpus; None -> synthesize
    output: str = "runs/desk"


@dataclass(frozen=True)
class CorpusSettings:
    n_per_digit: int = 30
    duration: float = 0.5
    sample_rate: int = 16000
    n_speakers: int = 16
    # defender: Eve-GAN, surrogates, generator; attacker: the eavesdropper's model; test: held out
    splits: dict = field(default_factory=lambda: {"defender": 0.4, "attacker": 0.4, "test": 0.2})


@dataclass(frozen=True)
class GridSettings:
    sensor: list = field(default_factory=lambda: ["mmwave"])
    material: list = field(default_factory=lambda: ["tinfoil", "chip_bag", "carton"])
    distance_source_to_object: list = field(default_factory=lambda: [0.5, 1.5])
    distance_sensor_to_object: list = field(default_factory=lambda: [0.5, 1.5])
    angle: list = field(default_factory=lambda: [-15.0, 0.0, 15.0])
    volume: list = field(default_factory=lambda: [70.0, 80.0])
    samples_per_scenario: int = 4


@dataclass(frozen=True)
class ChannelSettings:
    # per-sensor overrides, e.g. {"mmwave": {"anchors": [[20, 0], [1000, 0]], "noise_floor_db": -80}}
    sensors: dict = field(default_factory=dict)
    materials: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EveGanSettings:
    beta_con: float = 1.0
    beta_fm: float = 1.0
    lr: float = 1e-3
    steps: int = 300
    batch: int = 8
    non_saturating: bool = False


@dataclass(frozen=True)
class SurrogateSettings:
    classifier_widths: list = field(default_factory=lambda: [32, 40, 48])
    recognizer_width: int = 48
    attacker_width: int = 20
    classifier_steps: int = 300
    recognizer_steps: int = 600
    batch: int = 32
    lr: float = 3e-3
    attacker_views: int = 3  # scenarios each attacker clip is eavesdropped through
    defender_views: int = 3  # translated views per defender clip


@dataclass(frozen=True)
class PgmSettings:
    sample_rate: int = 16000
    segment_ms: float = 50.0
    lambda_kl: float = 1.0
    lambda_ens: float = 1.0
    lambda_rec: float = 10.0
    k_surrogates: int = 3
    rho_db: float = 16.0
    t_sr: float = 0.5
    ensemble_sign: float = 1.0
    use_ppg: bool = False
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3


@dataclass(frozen=True)
class EvalSettings:
    rho_sweep: list = field(default_factory=lambda: [6.0, 11.0, 16.0, 21.0, 26.0])
    views: int = 3  # scenarios each test clip is heard through
    mcd_line: float = 8.0
    quantize_bits: int = 8
    resample_rate: int = 4000
    ddr_clean_min: float = 0.80
    ddr_perturbed_max: float = 0.20
    mcd_ratio_min: float = 2.0
    ddr_tolerance: float = 0.05
    trend_tolerance: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    paths: PathSettings = PathSettings()
    corpus: CorpusSettings = CorpusSettings()
    grid: GridSettings = GridSettings()
    channel: ChannelSettings = ChannelSettings()
    evegan: EveGanSettings = EveGanSettings()
    surrogates: SurrogateSettings = SurrogateSettings()
    pgm: PgmSettings = PgmSettings()
    eval: EvalSettings = EvalSettings()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidInputError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise InvalidInputError(f"{where or 'config'}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        path = f"{where}.{k}" if where else k
        if is_dataclass(t):
            kwargs[k] = _build(t, v, path)
        else:
            kwargs[k] = _coerce(t, v, path)
    return cls(**kwargs)


def _coerce(t, v, path: str):
    origin = typing.get_origin(t)
    if origin in (typing.Union, types.UnionType):
        if v is None and type(None) in typing.get_args(t):
            return None
        t = next(a for a in typing.get_args(t) if a is not type(None))
    if t is bool:
        if not isinstance(v, bool):
            raise InvalidInputError(f"{path}: expected true/false")
        return v
    if t in (int, float):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InvalidInputError(f"{path}: expected a number")
        if t is int and float(v) != int(v):
            raise InvalidInputError(f"{path}: expected an integer")
        return t(v)
    if t is str:
        if not isinstance(v, str):
            raise InvalidInputError(f"{path}: expected a string")
        return v
    if t is list:
        if not isinstance(v, list):
            raise InvalidInputError(f"{path}: expected a list")
        return v
    if t is dict:
        if not isinstance(v, dict):
            raise InvalidInputError(f"{path}: expected a mapping")
        return v
    return v


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML file (or defaults when path is None) and apply dotted-key overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InvalidInputError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise InvalidInputError(f"config is not valid YAML: {e}") from e
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidInputError(f"override {key}: {part} is not a section")
        node[parts[-1]] = value
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if cfg.corpus.n_per_digit < 1:
        raise InvalidInputError("corpus.n_per_digit must be positive")
    if set(cfg.corpus.splits) != {"defender", "attacker", "test"}:
        raise InvalidInputError("corpus.splits needs exactly defender, attacker and test")
    if any(v <= 0 for v in cfg.corpus.splits.values()):
        raise InvalidInputError("corpus.splits fractions must be positive")
    if cfg.pgm.k_surrogates > len(cfg.surrogates.classifier_widths):
        raise InvalidInputError("surrogates.classifier_widths needs one width per surrogate")
    for name in ("steps", "batch"):
        if getattr(cfg.evegan, name) < 1 or getattr(cfg.pgm, name) < 1:
            raise InvalidInputError(f"{name} must be positive")
    if not cfg.eval.rho_sweep:
        raise InvalidInputError("eval.rho_sweep is empty")


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Replace fields inside sections: with_overrides(cfg, pgm={"steps": 10})."""
    out = cfg
    for name, changes in sections.items():
        out = replace(out, **{name: replace(getattr(out, name), **changes)})
    validate(out)
    return out
