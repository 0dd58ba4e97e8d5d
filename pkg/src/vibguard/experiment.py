"""Desk-scale pipeline: corpus, simulated eavesdropping, Eve-GAN, surrogates, generator, evaluation.

Each stage is a plain function of (config, inputs) so the CLI can run them one
at a time from files, and the acceptance run can chain them in memory.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import channel, dsp, metrics, pgm as pgm_mod, surrogates as sur
from .config import ExperimentConfig
from .dsp import AudioBuffer
from .errors import InvalidInputError, StateError
from .nn import Module, Tensor, load_checkpoint, no_grad, save_checkpoint
from .translator import EveHyper, TranslatorModel, make_translation_pairs, train_evegan, evaluate_translation

DEFENSES = ("none", "gaussian", "pgm")


def _say(log, msg: str):
    if log:
        log(msg)


# ------------------------------------------------------------------ setup


def build_corpus(cfg: ExperimentConfig) -> dict[str, list[sur.Utterance]]:
    """Split name -> utterances, from the configured manifest or the synthetic digit corpus."""
    c = cfg.corpus
    if cfg.paths.corpus:
        utts = sur.load_corpus(cfg.paths.corpus, c.duration)
        if any(u.audio.sample_rate != c.sample_rate for u in utts):
            raise InvalidInputError(f"corpus clips must be {c.sample_rate} Hz")
    else:
        utts = sur.synthesize_digit_corpus(c.n_per_digit, cfg.seed, c.sample_rate, c.duration, c.n_speakers, c.splits)
    out = {k: [u for u in utts if u.split == k] for k in c.splits}
    empty = [k for k, v in out.items() if not v]
    if empty:
        raise InvalidInputError(f"corpus splits without utterances: {empty}")
    return out


def scenario_grid(cfg: ExperimentConfig) -> list[channel.ScenarioVector]:
    g = cfg.grid
    grid = channel.scenario_grid(sensor=g.sensor, material=g.material,
                                 distance_source_to_object=g.distance_source_to_object,
                                 distance_sensor_to_object=g.distance_sensor_to_object,
                                 angle=g.angle, volume=g.volume)
    if not grid:
        raise InvalidInputError("scenario grid is empty")
    return grid


def channel_tables(cfg: ExperimentConfig) -> tuple[dict, dict]:
    """(sensor profiles, material offsets) with config overrides applied."""
    materials = dict(channel.DEFAULT_MATERIALS)
    for k, v in cfg.channel.materials.items():
        materials[k] = float(v)
    return channel.profiles_from_config(cfg.channel.sensors), materials


def simulate(cfg: ExperimentConfig, clips: list[AudioBuffer], seed: int,
             samples_per_scenario: int | None = None) -> list[channel.Triple]:
    profiles, materials = channel_tables(cfg)
    return channel.synthesize_scenario_grid(scenario_grid(cfg), clips, seed, samples_per_scenario, profiles, materials)


@dataclass(frozen=True)
class View:
    """One clip heard through one scenario with a fixed noise seed."""

    clip: int
    scenario: int
    seed: int


def assign_views(n_clips: int, n_scenarios: int, views: int, seed: int) -> list[View]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        for si in rng.choice(n_scenarios, size=min(views, n_scenarios), replace=False):
            out.append(View(i, int(si), channel.triple_seed(seed, int(si), i)))
    return out


class Eavesdropper:
    """Simulated side channel over the configured grid."""

    def __init__(self, cfg: ExperimentConfig):
        self.grid = scenario_grid(cfg)
        profiles, materials = channel_tables(cfg)
        self.channels = [channel.build_channel(z, profiles, materials) for z in self.grid]

    def __call__(self, audio: AudioBuffer, scenario: int, seed: int) -> AudioBuffer:
        return channel.apply_channel(audio, self.channels[scenario], seed)

    @property
    def sensor_rate(self) -> int:
        return self.channels[0].sensor_rate


# -------------------------------------------------------------- Eve-GAN


def eve_hyper(cfg: ExperimentConfig) -> EveHyper:
    e = cfg.evegan
    return EveHyper(beta_con=e.beta_con, beta_fm=e.beta_fm, lr=e.lr, steps=e.steps, batch=e.batch,
                    seed=cfg.seed, non_saturating=e.non_saturating)


def fit_translator(cfg: ExperimentConfig, triples: list[channel.Triple], out_dir=None, log=None):
    return train_evegan([t.audio for t in triples], [t.eavesdropped for t in triples], eve_hyper(cfg), out_dir, log)


def translation_ssim(model: TranslatorModel, cfg: ExperimentConfig, clips: list[AudioBuffer], seed: int) -> float:
    """Held-out SSIM: fresh clips through every scenario, references from the same scenario."""
    triples = simulate(cfg, clips, seed, samples_per_scenario=min(3, len(clips)))
    return evaluate_translation(model, make_translation_pairs(triples, seed=seed))


def translate_batch(model: TranslatorModel, audio: np.ndarray, references: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(audio), chunk):
            out.append(model(Tensor(audio[s : s + chunk]), Tensor(references[s : s + chunk])).data)
    return np.concatenate(out)


# ------------------------------------------------------------ classifiers


def save_model(path, model: Module, meta: dict | None = None) -> None:
    kind = "classifier" if isinstance(model, sur.DigitClassifier) else "recognizer"
    info = {"kind": kind, "width": model.width, "front": asdict(model.front)}
    if kind == "classifier":
        info["kernel"] = model.kernel
    info.update(meta or {})
    save_checkpoint(path, model.state_dict(), None, info)


def load_model(path) -> Module:
    tensors, _, meta = load_checkpoint(path)
    front = sur.FrontEnd(**meta["front"])
    rng = np.random.default_rng(0)
    if meta["kind"] == "classifier":
        model = sur.DigitClassifier(rng, meta["width"], meta["kernel"], front)
    elif meta["kind"] == "recognizer":
        model = sur.CtcRecognizer(rng, meta["width"], front)
    else:
        raise InvalidInputError(f"{path}: unknown model kind {meta['kind']!r}")
    model.load_state_dict(tensors)
    return model


def _front(rate: int) -> sur.FrontEnd:
    return sur.FrontEnd(sample_rate=rate)


@dataclass
class Attacker:
    """The eavesdropper's back end: digit classifier plus CTC recognizer on side-channel audio."""

    classifier: sur.DigitClassifier
    recognizer: sur.CtcRecognizer


def fit_attacker(cfg: ExperimentConfig, utts: list[sur.Utterance], ears: Eavesdropper, log=None) -> Attacker:
    """Train on real (simulated) eavesdrops of the attacker's own clips, several scenarios per clip."""
    s = cfg.surrogates
    views = assign_views(len(utts), len(ears.grid), s.attacker_views, cfg.seed + 11)
    heard = [(ears(utts[v.clip].audio, v.scenario, v.seed), utts[v.clip]) for v in views]
    front = _front(ears.sensor_rate)
    t0 = time.perf_counter()
    clf = sur.train_classifier([(a, u.label) for a, u in heard],
                               sur.TrainHyper(s.classifier_steps, s.batch, s.lr, cfg.seed + 21), s.attacker_width,
                               front=front)
    rec = sur.train_recognizer([(a, u.transcript) for a, u in heard],
                               sur.TrainHyper(s.recognizer_steps, s.batch, s.lr, cfg.seed + 22), s.recognizer_width,
                               front=front)
    _say(log, f"attacker trained on {len(heard)} eavesdrops in {time.perf_counter() - t0:.0f} s")
    return Attacker(clf.freeze(), rec.freeze())


def fit_surrogates(cfg: ExperimentConfig, translator: TranslatorModel, utts: list[sur.Utterance],
                   references: list[AudioBuffer], log=None) -> list[pgm_mod.Surrogate]:
    """K defender surrogates trained on translated defender clips.

    Every member has a classifier (widths from the config); the first also
    carries the CTC recognizer.
    """
    s = cfg.surrogates
    rng = np.random.default_rng(cfg.seed + 31)
    X = np.stack([u.audio.samples for u in utts])
    R = np.stack([r.samples for r in references])
    idx = np.repeat(np.arange(len(utts)), s.defender_views)
    ridx = rng.integers(len(R), size=len(idx))
    T = translate_batch(translator, X[idx], R[ridx])
    rate = translator.sensor_rate
    data = [(AudioBuffer(T[j], rate), utts[i]) for j, i in enumerate(idx)]
    front = _front(rate)
    t0 = time.perf_counter()
    out = []
    for k in range(cfg.pgm.k_surrogates):
        clf = sur.train_classifier([(a, u.label) for a, u in data],
                                   sur.TrainHyper(s.classifier_steps, s.batch, s.lr, cfg.seed + 40 + k),
                                   s.classifier_widths[k], front=front)
        rec = None
        if k == 0:
            rec = sur.train_recognizer([(a, u.transcript) for a, u in data],
                                       sur.TrainHyper(s.recognizer_steps, s.batch, s.lr, cfg.seed + 50),
                                       s.recognizer_width, front=front).freeze()
        out.append(pgm_mod.Surrogate(rec, clf.freeze()))
    _say(log, f"{len(out)} surrogates trained on {len(data)} translated clips in {time.perf_counter() - t0:.0f} s")
    return out


# ------------------------------------------------------------- generator


def pgm_config(cfg: ExperimentConfig) -> pgm_mod.PgmConfig:
    p = cfg.pgm
    return pgm_mod.PgmConfig(sample_rate=p.sample_rate, segment_ms=p.segment_ms, lambda_kl=p.lambda_kl,
                             lambda_ens=p.lambda_ens, lambda_rec=p.lambda_rec, k_surrogates=p.k_surrogates,
                             rho_db=p.rho_db, t_sr=p.t_sr, ensemble_sign=p.ensemble_sign, use_ppg=p.use_ppg)


def pgm_hyper(cfg: ExperimentConfig) -> pgm_mod.PgmHyper:
    p = cfg.pgm
    return pgm_mod.PgmHyper(steps=p.steps, batch=p.batch, lr=p.lr, seed=cfg.seed)


def fit_pgm(cfg: ExperimentConfig, translator: TranslatorModel, surrogates: list[pgm_mod.Surrogate],
            utts: list[sur.Utterance], references: list[AudioBuffer], out_dir=None, log=None):
    if not translator.is_frozen():
        raise StateError("translator must be frozen before generator training")
    data = [pgm_mod.PgmExample(u.audio, u.label, u.transcript) for u in utts]
    return pgm_mod.train_pgm(translator, surrogates, data, references, pgm_hyper(cfg), pgm_config(cfg), out_dir, log)


# ------------------------------------------------------------ evaluation


def gaussian_at_snr(audio: AudioBuffer, snr: float, seed: int) -> AudioBuffer:
    """audio plus white noise exactly `snr` dB below it."""
    noise = AudioBuffer(np.random.default_rng(seed).standard_normal(len(audio)), audio.sample_rate)
    return audio.with_samples(audio.samples + dsp.snr_normalize(noise, audio, snr).samples)


@dataclass
class Heard:
    """One evaluation view under one defense."""

    defense: str
    view: View
    played: AudioBuffer  # what the loudspeaker emits
    eavesdropped: AudioBuffer


def _defend(defense: str, audio: AudioBuffer, view: View, gen, snr: float) -> AudioBuffer:
    if defense == "none":
        return audio
    if defense == "gaussian":
        return gaussian_at_snr(audio, snr, view.seed + 1)
    return pgm_mod.perturb(gen, audio, view.seed)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def _wer(attacker: Attacker, heard: list[AudioBuffer], refs: list[str]) -> float:
    hyp = attacker.recognizer.transcribe(heard)
    return _mean([metrics.wer(r, h) for r, h in zip(refs, hyp)])


def evaluate_defenses(cfg: ExperimentConfig, gen: pgm_mod.PerturbationGenerator, attacker: Attacker,
                      utts: list[sur.Utterance], ears: Eavesdropper, log=None) -> dict:
    """Defense comparison (none, Gaussian noise, generator) plus the noise-floor MCD baseline.

    MCD is measured on the side-channel capture against the capture of the
    clean clip in the same scenario with the same sensor noise. The
    no-defense baseline compares two captures of the clean clip that differ
    only in sensor noise. LSD compares what is played against the original.
    """
    views = assign_views(len(utts), len(ears.grid), cfg.eval.views, cfg.seed + 61)
    labels = np.array([utts[v.clip].label for v in views])
    refs = [utts[v.clip].transcript for v in views]
    clean_heard = [ears(utts[v.clip].audio, v.scenario, v.seed) for v in views]
    pert_played = [pgm_mod.perturb(gen, utts[v.clip].audio, v.seed) for v in views]
    # noise at the SNR the generator actually achieved on this clip
    snrs = [dsp.snr_db(utts[v.clip].audio.samples, p.samples - utts[v.clip].audio.samples)
            for v, p in zip(views, pert_played)]
    rows = {}
    per_view = {}
    for defense in DEFENSES:
        if defense == "none":
            played = [utts[v.clip].audio for v in views]
            heard = clean_heard
            mcd_ref = [ears(utts[v.clip].audio, v.scenario, v.seed + 7) for v in views]
        else:
            played = pert_played if defense == "pgm" else [
                gaussian_at_snr(utts[v.clip].audio, s, v.seed + 1) for v, s in zip(views, snrs)]
            heard = [ears(p, v.scenario, v.seed) for p, v in zip(played, views)]
            mcd_ref = clean_heard
        preds = sur.predict_digits(attacker.classifier, heard)
        mcds = [metrics.mcd(r, h) for r, h in zip(mcd_ref, heard)]
        lsds = [metrics.lsd(utts[v.clip].audio, p) for v, p in zip(views, played)]
        rows[defense] = {
            "defense": defense,
            "mcd": _mean(mcds),
            "wer": _wer(attacker, heard, refs),
            "ddr": sur.ddr(preds, labels),
            "lsd_db": _mean(lsds),
            "snr_db": _mean(snrs) if defense != "none" else math.inf,
        }
        per_view[defense] = {"mcd": mcds, "lsd": lsds, "heard": heard, "played": played}
        _say(log, f"{defense:9s} " + " ".join(f"{k}={v:.3f}" for k, v in rows[defense].items() if k != "defense"))
    return {"table": [rows[d] for d in DEFENSES], "views": views, "per_view": per_view, "snrs": snrs}


def rho_sweep(cfg: ExperimentConfig, gen: pgm_mod.PerturbationGenerator, utts: list[sur.Utterance],
              ears: Eavesdropper, log=None) -> list[dict]:
    views = assign_views(len(utts), len(ears.grid), cfg.eval.views, cfg.seed + 61)
    clean_heard = [ears(utts[v.clip].audio, v.scenario, v.seed) for v in views]
    out = []
    for rho in cfg.eval.rho_sweep:
        g = pgm_mod.with_rho(gen, rho)
        played = [pgm_mod.perturb(g, utts[v.clip].audio, v.seed) for v in views]
        heard = [ears(p, v.scenario, v.seed) for p, v in zip(played, views)]
        row = {"rho_db": float(rho),
               "mcd": _mean([metrics.mcd(c, h) for c, h in zip(clean_heard, heard)]),
               "lsd_db": _mean([metrics.lsd(utts[v.clip].audio, p) for v, p in zip(views, played)])}
        out.append(row)
        _say(log, f"rho={rho:g} mcd={row['mcd']:.3f} lsd={row['lsd_db']:.3f}")
    return out


def robustness_report(cfg: ExperimentConfig, evaluation: dict) -> list[dict]:
    """MCD after an attacker-side transform, one row per transform.

    The same transform is applied to the clean capture, so a transform that
    merely discards bandwidth does not inflate the distance.
    """
    heard = evaluation["per_view"]["pgm"]["heard"]
    clean = evaluation["per_view"]["none"]["heard"]
    e = cfg.eval
    transforms = {
        "identity": lambda a: a,
        f"quantize_{e.quantize_bits}bit": lambda a: metrics.transform_quantize(a, e.quantize_bits),
        f"resample_{e.resample_rate}hz": lambda a: metrics.transform_resample_roundtrip(a, e.resample_rate),
    }
    rows = []
    for name, fn in transforms.items():
        m = _mean([metrics.mcd(fn(c), fn(h)) for c, h in zip(clean, heard)])
        rows.append({"transform": name, "mcd": m, "line": e.mcd_line, "passed": bool(m >= e.mcd_line)})
    return rows


def diff_table(rows: list[dict]) -> str:
    """Plain-text table of failing robustness rows: measured MCD, the line, and the shortfall."""
    lines = [f"{'transform':24s} {'mcd':>8s} {'line':>8s} {'short':>8s}"]
    for r in rows:
        if not r["passed"]:
            lines.append(f"{r['transform']:24s} {r['mcd']:8.3f} {r['line']:8.3f} {r['line'] - r['mcd']:8.3f}")
    return "\n".join(lines)


def trend_ok(values: list[float], tolerance: float) -> bool:
    """Non-increasing, allowing at most one rise, and that rise no more than `tolerance` (relative)."""
    rises = [(a, b) for a, b in zip(values, values[1:]) if b > a]
    if not rises:
        return True
    if len(rises) > 1:
        return False
    a, b = rises[0]
    return b - a <= tolerance * abs(a)


# ---------------------------------------------------------------- the run


def run_desk(cfg: ExperimentConfig, out_dir: str | Path | None = None, log=None) -> dict:
    """Every stage, start to finish. Returns the summary; with out_dir, also writes all artifacts."""
    t_start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def lap(name, t0):
        timings[name] = time.perf_counter() - t0
        _say(log, f"[{name}] {timings[name]:.0f} s")

    t0 = time.perf_counter()
    corpus = build_corpus(cfg)
    ears = Eavesdropper(cfg)
    defender = corpus["defender"]
    eve_set = simulate(cfg, [u.audio for u in defender], cfg.seed + 1, cfg.grid.samples_per_scenario)
    references = [t.eavesdropped for t in eve_set]
    lap("simulate", t0)

    t0 = time.perf_counter()
    untrained = TranslatorModel(np.random.default_rng([cfg.seed, 1]), cfg.corpus.sample_rate, ears.sensor_rate)
    translator, _, eve_curves = fit_translator(cfg, eve_set, out / "evegan" if out else None)
    translator.freeze()
    held_out = [u.audio for u in corpus["test"]]
    ssim_trained = translation_ssim(translator, cfg, held_out, cfg.seed + 2)
    ssim_untrained = translation_ssim(untrained, cfg, held_out, cfg.seed + 2)
    _say(log, f"translator SSIM {ssim_trained:.3f} (untrained {ssim_untrained:.3f})")
    lap("evegan", t0)

    t0 = time.perf_counter()
    attacker = fit_attacker(cfg, corpus["attacker"], ears, log)
    surrogate_set = fit_surrogates(cfg, translator, defender, references, log)
    lap("surrogates", t0)

    t0 = time.perf_counter()
    gen, _, pgm_curves = fit_pgm(cfg, translator, surrogate_set, defender, references,
                                 out / "pgm" if out else None)
    lap("pgm", t0)

    t0 = time.perf_counter()
    evaluation = evaluate_defenses(cfg, gen, attacker, corpus["test"], ears, log)
    sweep = rho_sweep(cfg, gen, corpus["test"], ears, log)
    robust = robustness_report(cfg, evaluation)
    lap("evaluate", t0)

    table = {r["defense"]: r for r in evaluation["table"]}
    e = cfg.eval
    mcd_baseline = table["none"]["mcd"]
    checks = {
        "ddr_clean": table["none"]["ddr"] >= e.ddr_clean_min - e.ddr_tolerance,
        "ddr_perturbed": table["pgm"]["ddr"] <= e.ddr_perturbed_max + e.ddr_tolerance,
        "mcd_ratio": table["pgm"]["mcd"] >= e.mcd_ratio_min * mcd_baseline,
        "lsd_below_noise": table["pgm"]["lsd_db"] < table["gaussian"]["lsd_db"],
        "rho_mcd_trend": trend_ok([r["mcd"] for r in sweep], e.trend_tolerance),
        "rho_lsd_trend": trend_ok([r["lsd_db"] for r in sweep], e.trend_tolerance),
        "robust_mcd": all(r["passed"] for r in robust),
    }
    summary = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "ssim_trained": ssim_trained,
        "ssim_untrained": ssim_untrained,
        "table": evaluation["table"],
        "mcd_baseline": mcd_baseline,
        "rho_sweep": sweep,
        "robustness": robust,
        "checks": checks,
        "timings_s": timings,
        "total_s": time.perf_counter() - t_start,
    }
    if out:
        write_outputs(cfg, out, summary, evaluation, eve_curves, pgm_curves, ears)
        (out / "surrogates").mkdir(exist_ok=True)
        for k, s in enumerate(surrogate_set):
            for m in s.modules():
                save_model(out / "surrogates" / f"{type(m).__name__.lower()}_{k}.ckpt", m)
        (out / "attacker").mkdir(exist_ok=True)
        save_model(out / "attacker" / "classifier.ckpt", attacker.classifier)
        save_model(out / "attacker" / "recognizer.ckpt", attacker.recognizer)
    return summary


def write_outputs(cfg: ExperimentConfig, out: Path, summary: dict, evaluation: dict, eve_curves, pgm_curves,
                  ears: Eavesdropper) -> None:
    from . import plots

    h = cfg.hash()
    reports = []
    for d in DEFENSES:
        row = next(r for r in evaluation["table"] if r["defense"] == d)
        reports.append(metrics.MetricReport(mcd=row["mcd"], wer=row["wer"], ddr=row["ddr"], lsd_db=row["lsd_db"],
                                            snr_db=row["snr_db"], label=d, notes="lsd_db is a PESQ proxy"))
    metrics.append_reports(out / "reports.csv", reports, h)
    plots.write_defense_table(out / "defenses.csv", evaluation["table"], h)
    plots.write_rho_sweep(out, summary["rho_sweep"], h)
    plots.write_robustness(out / "robustness.csv", summary["robustness"], h)
    plots.write_loss_curves(out, "evegan", eve_curves, h)
    plots.write_loss_curves(out, "pgm", pgm_curves, h)
    plots.write_frequency_responses(out, ears, h)
    metrics.write_summary(out / "summary.json", summary, h)
