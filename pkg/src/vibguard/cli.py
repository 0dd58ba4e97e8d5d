"""Command-line entry point: `vibguard <command> ...`.

Exit codes: 0 ok, 2 invalid input, 3 state error (e.g. a model that should be
frozen or present is not), 4 degenerate input (e.g. silent audio).
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import channel, dsp, experiment as ex, metrics, pgm as pgm_mod, plots, surrogates as sur
from .config import ExperimentConfig, dump_config, load_config
from .errors import DegenerateInputError, InvalidInputError, StateError
from .translator import load_translator

EXIT_INVALID, EXIT_STATE, EXIT_DEGENERATE = 2, 3, 4


def guarded(fn):
    """Map library errors to exit codes with a one-line message on stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StateError as e:
            click.echo(f"state error: {e}", err=True)
            sys.exit(EXIT_STATE)
        except DegenerateInputError as e:
            click.echo(f"degenerate input: {e}", err=True)
            sys.exit(EXIT_DEGENERATE)
        except InvalidInputError as e:
            click.echo(f"invalid input: {e}", err=True)
            sys.exit(EXIT_INVALID)

    return wrapper


def _parse_set(values) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise InvalidInputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _config(path, sets) -> ExperimentConfig:
    return load_config(path, _parse_set(sets))


def _stamp(out: Path, command: str, cfg: ExperimentConfig | None, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    info = {"command": command, **extra}
    if cfg is not None:
        info["config_hash"] = cfg.hash()
        dump_config(cfg, out / "config.yaml")
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str))


def _say(msg: str):
    click.echo(msg, err=True)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                              help="YAML experiment config; defaults apply when omitted.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override a config key, e.g. --set pgm.steps=100 (repeatable).")


@click.group()
def main():
    """Adversarial playback perturbation against simulated vibration eavesdropping."""


@main.command("init-config")
@click.argument("path", type=click.Path(dir_okay=False))
@guarded
def init_config(path):
    """Write the default config to PATH."""
    dump_config(ExperimentConfig(), path)
    click.echo(path)


@main.command("synth-corpus")
@config_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def synth_corpus(config_path, sets, out):
    """Synthesize the toy spoken-digit corpus as WAVs plus manifest.csv."""
    cfg = _config(config_path, sets)
    c = cfg.corpus
    utts = sur.synthesize_digit_corpus(c.n_per_digit, cfg.seed, c.sample_rate, c.duration, c.n_speakers, c.splits)
    manifest = sur.write_corpus(utts, out)
    _stamp(Path(out), "synth-corpus", cfg, utterances=len(utts))
    click.echo(manifest)


@main.command()
@config_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def simulate(config_path, sets, out):
    """Pass the defender clips through every scenario of the grid; one directory per scenario."""
    cfg = _config(config_path, sets)
    corpus = ex.build_corpus(cfg)
    triples = ex.simulate(cfg, [u.audio for u in corpus["defender"]], cfg.seed + 1, cfg.grid.samples_per_scenario)
    manifest = channel.write_dataset(triples, out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    _stamp(Path(out), "simulate", cfg, triples=len(triples), manifest_sha256=digest)
    click.echo(f"{len(triples)} triples in {len({t.scenario_index for t in triples})} scenarios -> {out}")


def _load_triples(data) -> list[channel.Triple]:
    triples = channel.load_dataset(data)
    if not triples:
        raise InvalidInputError(f"{data}: dataset is empty")
    return triples


@main.command("train-evegan")
@config_option
@set_option
@click.option("--data", type=click.Path(file_okay=False), required=True, help="Directory written by `simulate`.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def train_evegan_cmd(config_path, sets, data, out):
    """Train the translator; writes translator.ckpt, discriminator.ckpt, curves.csv."""
    cfg = _config(config_path, sets)
    triples = _load_triples(data)
    model, _, curves = ex.fit_translator(cfg, triples, out)
    plots.write_loss_curves(out, "evegan", curves, cfg.hash())
    _stamp(Path(out), "train-evegan", cfg, steps=len(curves))
    click.echo(f"translator -> {Path(out) / 'translator.ckpt'}")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StateError(f"{what} not found at {path}; run the earlier stage first")
    return path


def _frozen_translator(path) -> object:
    model = load_translator(_require(Path(path), "frozen translator"))
    model.freeze()
    return model


@main.command("train-surrogates")
@config_option
@set_option
@click.option("--translator", "translator_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(file_okay=False), required=True, help="Directory written by `simulate`.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def train_surrogates_cmd(config_path, sets, translator_path, data, out):
    """Train the defender's surrogate ensemble (on translated audio) and the attacker's models."""
    cfg = _config(config_path, sets)
    translator = _frozen_translator(translator_path)
    corpus = ex.build_corpus(cfg)
    refs = [t.eavesdropped for t in _load_triples(data)]
    out = Path(out)
    (out / "surrogates").mkdir(parents=True, exist_ok=True)
    (out / "attacker").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(ex.fit_surrogates(cfg, translator, corpus["defender"], refs, _say)):
        for m in s.modules():
            ex.save_model(out / "surrogates" / f"{type(m).__name__.lower()}_{k}.ckpt", m)
    attacker = ex.fit_attacker(cfg, corpus["attacker"], ex.Eavesdropper(cfg), _say)
    ex.save_model(out / "attacker" / "classifier.ckpt", attacker.classifier)
    ex.save_model(out / "attacker" / "recognizer.ckpt", attacker.recognizer)
    _stamp(out, "train-surrogates", cfg)
    click.echo(f"models -> {out}")


def load_surrogates(directory: Path, k: int) -> list[pgm_mod.Surrogate]:
    out = []
    for i in range(k):
        clf = directory / f"digitclassifier_{i}.ckpt"
        rec = directory / f"ctcrecognizer_{i}.ckpt"
        if not clf.exists() and not rec.exists():
            raise StateError(f"surrogate {i} missing in {directory}")
        out.append(pgm_mod.Surrogate(ex.load_model(rec).freeze() if rec.exists() else None,
                                     ex.load_model(clf).freeze() if clf.exists() else None))
    return out


@main.command("train-pgm")
@config_option
@set_option
@click.option("--translator", "translator_path", type=click.Path(dir_okay=False), required=True)
@click.option("--models", type=click.Path(file_okay=False), required=True, help="Directory written by `train-surrogates`.")
@click.option("--data", type=click.Path(file_okay=False), required=True, help="Directory written by `simulate`.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def train_pgm_cmd(config_path, sets, translator_path, models, data, out):
    """Train the perturbation generator against the frozen translator and surrogates."""
    cfg = _config(config_path, sets)
    translator = _frozen_translator(translator_path)
    surrogate_set = load_surrogates(Path(models) / "surrogates", cfg.pgm.k_surrogates)
    corpus = ex.build_corpus(cfg)
    refs = [t.eavesdropped for t in _load_triples(data)]
    _, _, curves = ex.fit_pgm(cfg, translator, surrogate_set, corpus["defender"], refs, out)
    plots.write_loss_curves(out, "pgm", curves, cfg.hash())
    _stamp(Path(out), "train-pgm", cfg, steps=len(curves))
    click.echo(f"generator -> {Path(out) / 'pgm.ckpt'}")


def _checkpoint_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


@main.command()
@click.argument("input_wav", type=click.Path(dir_okay=False))
@click.argument("output_wav", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="pgm.ckpt from `train-pgm`.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--on-rate-mismatch", type=click.Choice(["resample", "reject"]), default=None,
              help="Required when the input rate differs from the generator's.")
@click.option("--latency-log", type=click.Path(dir_okay=False), default=None,
              help="CSV of per-segment latency (default: OUTPUT_WAV with .latency.csv).")
@guarded
def perturb(input_wav, output_wav, checkpoint, seed, on_rate_mismatch, latency_log):
    """Perturb a WAV segment by segment, as a live player would, logging per-segment latency."""
    ckpt = _require(Path(checkpoint), "generator checkpoint")
    gen = pgm_mod.load_pgm(ckpt)
    audio = dsp.read_wav(input_wav)
    rate = gen.cfg.sample_rate
    if audio.sample_rate != rate:
        if on_rate_mismatch is None:
            raise InvalidInputError(f"input is {audio.sample_rate} Hz but the generator runs at {rate} Hz; "
                                    "pass --on-rate-mismatch resample or reject")
        if on_rate_mismatch == "reject":
            raise InvalidInputError(f"rejected {audio.sample_rate} Hz input (generator runs at {rate} Hz)")
        audio = dsp.resample(audio, rate)
    if len(audio) == 0:
        raise DegenerateInputError("input has no samples")
    rows = []
    streamer = pgm_mod.StreamingPerturber(gen, seed, rows.append)
    L = gen.cfg.segment_length
    y = np.concatenate([streamer.push(audio.samples[s : s + L]) for s in range(0, len(audio), L)])
    dsp.write_wav(output_wav, audio.with_samples(y), "FLOAT")
    log_path = Path(latency_log) if latency_log else Path(output_wav).with_suffix(".latency.csv")
    h = _checkpoint_hash(ckpt)
    plots.write_csv(log_path, rows, ["segment", "latency_ms"], h)
    lat = np.array([r["latency_ms"] for r in rows])
    click.echo(f"{len(rows)} segments, latency mean {lat.mean():.2f} ms, max {lat.max():.2f} ms -> {output_wav}")


@main.command()
@config_option
@set_option
@click.option("--models", type=click.Path(file_okay=False), required=True, help="Directory holding attacker/*.ckpt.")
@click.option("--input", "inputs", type=click.Path(), multiple=True, required=True,
              help="WAV files or a directory of WAVs played in the room (repeatable).")
@click.option("--scenario", type=int, default=0, show_default=True, help="Index into the configured grid.")
@click.option("--reference", type=click.Path(dir_okay=False), default=None,
              help="Clean version of the input; adds a MetricReport against its eavesdropped capture.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def attack(config_path, sets, models, inputs, scenario, reference, seed, out):
    """Eavesdrop played audio through one simulated scenario and run the attacker's models on it."""
    cfg = _config(config_path, sets)
    models = Path(models) / "attacker"
    clf = ex.load_model(_require(models / "classifier.ckpt", "attacker classifier"))
    rec = ex.load_model(_require(models / "recognizer.ckpt", "attacker recognizer"))
    ears = ex.Eavesdropper(cfg)
    if not 0 <= scenario < len(ears.grid):
        raise InvalidInputError(f"scenario must be in [0, {len(ears.grid)})")
    files = []
    for p in map(Path, inputs):
        files.extend(sorted(p.glob("*.wav")) if p.is_dir() else [p])
    if not files:
        raise InvalidInputError("no input WAVs")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, heard = [], []
    for i, f in enumerate(files):
        a = dsp.read_wav(f)
        if a.sample_rate != cfg.corpus.sample_rate:
            a = dsp.resample(a, cfg.corpus.sample_rate)
        e = ears(a, scenario, channel.triple_seed(seed, scenario, i))
        dsp.write_wav(out / f"{f.stem}_eavesdropped.wav", e, "FLOAT")
        heard.append(e)
    n = min(len(h) for h in heard)
    classes = sur.predict_digits(clf, [h.with_samples(h.samples[:n]) for h in heard])
    texts = rec.transcribe([h.with_samples(h.samples[:n]) for h in heard])
    for f, c, t in zip(files, classes, texts):
        rows.append({"file": str(f), "digit": int(c), "word": sur.DIGIT_WORDS[int(c)], "transcript": t})
    plots.write_csv(out / "transcripts.csv", rows, ["file", "digit", "word", "transcript"], cfg.hash())
    if reference is not None:
        ref = dsp.read_wav(reference)
        if ref.sample_rate != cfg.corpus.sample_rate:
            ref = dsp.resample(ref, cfg.corpus.sample_rate)
        ref_heard = ears(ref, scenario, channel.triple_seed(seed, scenario, 0))
        test = heard[0]
        played = dsp.read_wav(files[0])
        m = min(len(ref_heard), len(test))
        report = metrics.MetricReport(
            mcd=metrics.mcd(ref_heard.with_samples(ref_heard.samples[:m]), test.with_samples(test.samples[:m])),
            wer=metrics.wer(_reference_words(reference), texts[0]),
            lsd_db=metrics.lsd(ref, played) if played.sample_rate == ref.sample_rate else float("nan"),
            scenario=ears.grid[scenario].as_row(), label=str(files[0]), notes="lsd_db is a PESQ proxy")
        metrics.append_reports(out / "reports.csv", [report], cfg.hash())
    _stamp(out, "attack", cfg, files=len(files), scenario=scenario)
    for r in rows:
        click.echo(f"{r['file']}: {r['word']} ({r['transcript']!r})")


def _reference_words(path) -> str:
    """Reference transcript: a sibling .txt file, or the file stem."""
    p = Path(path)
    txt = p.with_suffix(".txt")
    return txt.read_text().strip() if txt.exists() else p.stem


@main.command()
@config_option
@set_option
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True,
              help="Directory with pgm/pgm.ckpt and attacker/*.ckpt (or only reports.csv).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Defaults to the run directory.")
@guarded
def evaluate(config_path, sets, run_dir, out):
    """Defense comparison table, rho sweep, robustness report and plot data."""
    cfg = _config(config_path, sets)
    run = Path(run_dir)
    out = Path(out) if out else run
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    gen_path = run / "pgm" / "pgm.ckpt"
    if not gen_path.exists() or not (run / "attacker" / "classifier.ckpt").exists():
        # only a results ledger: tabulate it as-is
        table = []
        if (run / "reports.csv").exists():
            table = [{"defense": r["label"], "mcd": r["mcd"], "wer": r["wer"], "ddr": r["ddr"],
                      "lsd_db": r["lsd_db"], "snr_db": r["snr_db"]} for r in metrics.read_reports(run / "reports.csv")]
        plots.write_defense_table(out / "defenses.csv", table, h)
        click.echo(f"{len(table)} rows -> {out / 'defenses.csv'}")
        return
    gen = pgm_mod.load_pgm(gen_path)
    attacker = ex.Attacker(ex.load_model(run / "attacker" / "classifier.ckpt").freeze(),
                           ex.load_model(_require(run / "attacker" / "recognizer.ckpt", "attacker recognizer")).freeze())
    ears = ex.Eavesdropper(cfg)
    test = ex.build_corpus(cfg)["test"]
    evaluation = ex.evaluate_defenses(cfg, gen, attacker, test, ears, _say)
    sweep = ex.rho_sweep(cfg, gen, test, ears, _say)
    robust = ex.robustness_report(cfg, evaluation)
    plots.write_defense_table(out / "defenses.csv", evaluation["table"], h)
    plots.write_rho_sweep(out, sweep, h)
    plots.write_robustness(out / "robustness.csv", robust, h)
    plots.write_frequency_responses(out, ears, h)
    for name in ("evegan", "pgm"):
        curves = run / name / "curves.csv"
        if curves.exists():
            with open(curves, newline="") as fh:
                rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
            plots.write_loss_curves(out, name, rows, h)
    summary = {"table": evaluation["table"], "rho_sweep": sweep, "robustness": robust}
    metrics.write_summary(out / "summary.json", summary, h)
    for r in evaluation["table"]:
        click.echo(f"{r['defense']:9s} MCD {r['mcd']:.2f}  WER {r['wer']:.2f}  DDR {r['ddr']:.2f}  LSD {r['lsd_db']:.2f}")
    if not all(r["passed"] for r in robust):
        click.echo(ex.diff_table(robust))


@main.command()
@config_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@guarded
def run(config_path, sets, out):
    """Every stage in one process: simulate, train, evaluate."""
    cfg = _config(config_path, sets)
    summary = ex.run_desk(cfg, out, _say)
    _stamp(Path(out), "run", cfg)
    for name, ok in summary["checks"].items():
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}")
    if not summary["checks"]["robust_mcd"]:
        click.echo(ex.diff_table(summary["robustness"]))


if __name__ == "__main__":
    main()
