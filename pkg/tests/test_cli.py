import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from vibguard import dsp
from vibguard import experiment as ex
from vibguard.channel import ScenarioVector
from vibguard.cli import main
from vibguard.config import ExperimentConfig, load_config
from vibguard.dsp import AudioBuffer

# A small but complete run: every stage, a few seconds each.
TINY = {
    "corpus.n_per_digit": 20,
    "grid.samples_per_scenario": 1,
    "evegan.steps": 4,
    "evegan.batch": 4,
    "surrogates.classifier_widths": [8],
    "surrogates.classifier_steps": 400,
    "surrogates.recognizer_steps": 5,
    "surrogates.defender_views": 1,
    "pgm.k_surrogates": 1,
    "pgm.steps": 3,
    "pgm.batch": 2,
    "eval.views": 1,
}
SETS = [a for k, v in TINY.items() for a in ("--set", f"{k}={json.dumps(v)}")]


def invoke(*args, sets=True):
    res = CliRunner().invoke(main, [str(a) for a in args] + (SETS if sets else []))
    if res.exception is not None and not isinstance(res.exception, SystemExit):
        raise res.exception
    return res


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    steps = [
        ("simulate", "--out", d / "data"),
        ("train-evegan", "--data", d / "data", "--out", d / "evegan"),
        ("train-surrogates", "--translator", d / "evegan" / "translator.ckpt", "--data", d / "data", "--out", d),
        ("train-pgm", "--translator", d / "evegan" / "translator.ckpt", "--models", d, "--data", d / "data",
         "--out", d / "pgm"),
    ]
    for args in steps:
        res = invoke(*args)
        assert res.exit_code == 0, res.output
    return d


@pytest.fixture
def second(tmp_path):
    audio = dsp.tone(440.0, 1.0, 16000, amplitude=0.3)
    noise = np.random.default_rng(0).standard_normal(16000) * 0.01
    path = tmp_path / "in.wav"
    dsp.write_wav(path, audio.with_samples(audio.samples + noise), "FLOAT")
    return path


# ------------------------------------------------------------- plumbing


def test_help_lists_every_command():
    out = invoke("--help", sets=False).output
    for name in ("init-config", "synth-corpus", "simulate", "train-evegan", "train-surrogates", "train-pgm",
                 "perturb", "attack", "evaluate", "run"):
        assert name in out


def test_init_config_writes_defaults(tmp_path):
    res = invoke("init-config", tmp_path / "c.yaml", sets=False)
    assert res.exit_code == 0
    assert load_config(tmp_path / "c.yaml") == ExperimentConfig()


def test_malformed_set_is_invalid_input(tmp_path):
    res = invoke("simulate", "--out", tmp_path, "--set", "pgm.steps", sets=False)
    assert res.exit_code == 2
    res = invoke("simulate", "--out", tmp_path, "--set", "pgm.nope=1", sets=False)
    assert res.exit_code == 2


def test_synth_corpus(tmp_path):
    res = invoke("synth-corpus", "--out", tmp_path, "--set", "corpus.n_per_digit=5", sets=False)
    assert res.exit_code == 0
    manifest = rows(tmp_path / "manifest.csv")
    assert len(manifest) == 50
    assert json.loads((tmp_path / "run.json").read_text())["utterances"] == 50


# ------------------------------------------------------------- simulate


def test_simulate_writes_one_directory_per_scenario(run):
    dirs = sorted(p for p in (run / "data").iterdir() if p.is_dir())
    assert len(dirs) == 72 and dirs[0].name == "scenario_000"
    assert len(rows(run / "data" / "manifest.csv")) == 72


def test_simulate_rerun_gives_same_manifest_hash(run, tmp_path):
    assert invoke("simulate", "--out", tmp_path).exit_code == 0
    a = json.loads((run / "data" / "run.json").read_text())
    b = json.loads((tmp_path / "run.json").read_text())
    assert a["manifest_sha256"] == b["manifest_sha256"]
    assert a["config_hash"] == b["config_hash"] == load_config(None, TINY).hash()


# ------------------------------------------------------------- training


def test_curves_have_one_row_per_step(run):
    assert len(rows(run / "evegan" / "curves.csv")) == TINY["evegan.steps"]
    assert len(rows(run / "pgm" / "curves.csv")) == TINY["pgm.steps"]
    stamped = rows(run / "pgm" / "pgm_curves.csv")
    assert {r["config_hash"] for r in stamped} == {load_config(None, TINY).hash()}


def test_training_outputs_exist(run):
    for rel in ("evegan/translator.ckpt", "evegan/discriminator.ckpt", "surrogates/digitclassifier_0.ckpt",
                "surrogates/ctcrecognizer_0.ckpt", "attacker/classifier.ckpt", "attacker/recognizer.ckpt",
                "pgm/pgm.ckpt", "pgm/playback_disc.ckpt"):
        assert (run / rel).exists(), rel


def test_pgm_without_translator_is_a_state_error(run, tmp_path):
    res = invoke("train-pgm", "--translator", tmp_path / "none.ckpt", "--models", run, "--data", run / "data",
                 "--out", tmp_path / "pgm")
    assert res.exit_code == 3
    res = invoke("train-surrogates", "--translator", tmp_path / "none.ckpt", "--data", run / "data",
                 "--out", tmp_path)
    assert res.exit_code == 3


def test_pgm_without_surrogates_is_a_state_error(run, tmp_path):
    res = invoke("train-pgm", "--translator", run / "evegan" / "translator.ckpt", "--models", tmp_path,
                 "--data", run / "data", "--out", tmp_path / "pgm")
    assert res.exit_code == 3


def test_training_on_a_missing_dataset_is_invalid(tmp_path):
    res = invoke("train-evegan", "--data", tmp_path / "nothing", "--out", tmp_path / "eve")
    assert res.exit_code == 2


def test_training_is_bit_reproducible(run, tmp_path):
    assert invoke("train-evegan", "--data", run / "data", "--out", tmp_path / "eve").exit_code == 0
    assert (tmp_path / "eve" / "translator.ckpt").read_bytes() == (run / "evegan" / "translator.ckpt").read_bytes()
    res = invoke("train-pgm", "--translator", run / "evegan" / "translator.ckpt", "--models", run,
                 "--data", run / "data", "--out", tmp_path / "pgm")
    assert res.exit_code == 0
    assert (tmp_path / "pgm" / "pgm.ckpt").read_bytes() == (run / "pgm" / "pgm.ckpt").read_bytes()


# -------------------------------------------------------------- perturb


def test_perturb_one_second_gives_twenty_segments(run, second, tmp_path):
    out = tmp_path / "out.wav"
    res = invoke("perturb", second, out, "--checkpoint", run / "pgm" / "pgm.ckpt", "--seed", 3, sets=False)
    assert res.exit_code == 0, res.output
    y = dsp.read_wav(out)
    assert y.sample_rate == 16000 and len(y) == 16000
    log = rows(out.with_suffix(".latency.csv"))
    assert [int(r["segment"]) for r in log] == list(range(20))
    assert all(float(r["latency_ms"]) > 0 for r in log)
    assert len({r["config_hash"] for r in log}) == 1 and len(log[0]["config_hash"]) == 16


def test_perturb_same_seed_is_bit_identical(run, second, tmp_path):
    ck = run / "pgm" / "pgm.ckpt"
    for name, seed in (("a.wav", 1), ("b.wav", 1), ("c.wav", 2)):
        assert invoke("perturb", second, tmp_path / name, "--checkpoint", ck, "--seed", seed,
                      "--latency-log", tmp_path / f"{name}.csv", sets=False).exit_code == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    assert (tmp_path / "a.wav").read_bytes() != (tmp_path / "c.wav").read_bytes()
    assert (tmp_path / "a.wav.csv").exists()


def test_perturb_matches_offline_perturbation(run, second, tmp_path):
    from vibguard import pgm as P

    out = tmp_path / "out.wav"
    invoke("perturb", second, out, "--checkpoint", run / "pgm" / "pgm.ckpt", "--seed", 5, sets=False)
    gen = P.load_pgm(run / "pgm" / "pgm.ckpt")
    offline = P.perturb(gen, dsp.read_wav(second), 5).samples
    np.testing.assert_allclose(dsp.read_wav(out).samples, offline.astype(np.float32), atol=1e-6)


def test_perturb_44k_needs_an_explicit_choice(run, tmp_path):
    src = tmp_path / "cd.wav"
    dsp.write_wav(src, dsp.tone(440.0, 0.5, 44100, amplitude=0.3), "PCM16")
    ck = run / "pgm" / "pgm.ckpt"
    res = invoke("perturb", src, tmp_path / "o.wav", "--checkpoint", ck, sets=False)
    assert res.exit_code == 2 and "--on-rate-mismatch" in res.output
    res = invoke("perturb", src, tmp_path / "o.wav", "--checkpoint", ck, "--on-rate-mismatch", "reject", sets=False)
    assert res.exit_code == 2 and not (tmp_path / "o.wav").exists()
    res = invoke("perturb", src, tmp_path / "o.wav", "--checkpoint", ck, "--on-rate-mismatch", "resample",
                 sets=False)
    assert res.exit_code == 0
    y = dsp.read_wav(tmp_path / "o.wav")
    assert y.sample_rate == 16000 and len(y) == 8000
    assert len(rows(tmp_path / "o.latency.csv")) == 10


def test_perturb_empty_input_is_degenerate(run, tmp_path):
    src = tmp_path / "empty.wav"
    dsp.write_wav(src, AudioBuffer(np.zeros(0), 16000), "PCM16")
    res = invoke("perturb", src, tmp_path / "o.wav", "--checkpoint", run / "pgm" / "pgm.ckpt", sets=False)
    assert res.exit_code == 4


def test_perturb_missing_checkpoint_is_a_state_error(second, tmp_path):
    res = invoke("perturb", second, tmp_path / "o.wav", "--checkpoint", tmp_path / "none.ckpt", sets=False)
    assert res.exit_code == 3


# --------------------------------------------------------------- attack


@pytest.fixture(scope="module")
def test_clips(run):
    d = run / "test_wavs"
    d.mkdir(exist_ok=True)
    utts = ex.build_corpus(load_config(None, TINY))["test"]
    for i, u in enumerate(utts):
        dsp.write_wav(d / f"{i:03d}_{u.label}.wav", u.audio, "FLOAT")
    return d


def test_attack_recognizes_clean_digits(run, test_clips, tmp_path):
    baseline = ex.scenario_grid(load_config(None, TINY)).index(ScenarioVector())
    res = invoke("attack", "--models", run, "--input", test_clips, "--scenario", baseline, "--out", tmp_path)
    assert res.exit_code == 0, res.output
    out = rows(tmp_path / "transcripts.csv")
    assert len(out) == 40
    hits = [int(Path(r["file"]).stem.split("_")[1]) == int(r["digit"]) for r in out]
    assert np.mean(hits) >= 0.8
    assert len(list(tmp_path.glob("*_eavesdropped.wav"))) == 40


def test_attack_on_perturbed_input_emits_a_report(run, test_clips, tmp_path):
    clean = sorted(test_clips.glob("*.wav"))[0]
    played = tmp_path / "played.wav"
    assert invoke("perturb", clean, played, "--checkpoint", run / "pgm" / "pgm.ckpt", sets=False).exit_code == 0
    res = invoke("attack", "--models", run, "--input", played, "--reference", clean, "--out", tmp_path / "atk")
    assert res.exit_code == 0, res.output
    report = rows(tmp_path / "atk" / "reports.csv")
    assert len(report) == 1
    assert float(report[0]["mcd"]) > 0 and float(report[0]["lsd_db"]) > 0


def test_attack_without_models_is_a_state_error(test_clips, tmp_path):
    res = invoke("attack", "--models", tmp_path, "--input", test_clips, "--out", tmp_path / "atk")
    assert res.exit_code == 3


def test_attack_rejects_bad_scenario(run, test_clips, tmp_path):
    res = invoke("attack", "--models", run, "--input", test_clips, "--scenario", 72, "--out", tmp_path)
    assert res.exit_code == 2


# ------------------------------------------------------------- evaluate


def test_evaluate_empty_results_gives_header_only_table(tmp_path):
    res = invoke("evaluate", "--run", tmp_path, sets=False)
    assert res.exit_code == 0
    lines = (tmp_path / "defenses.csv").read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",")[:5] == ["defense", "mcd", "wer", "ddr", "pesq_proxy_lsd_db"]


def test_evaluate_full_run(run, tmp_path):
    res = invoke("evaluate", "--run", run, "--out", tmp_path)
    assert res.exit_code == 0, res.output
    h = load_config(None, TINY).hash()
    table = rows(tmp_path / "defenses.csv")
    assert [r["defense"] for r in table] == ["none", "gaussian", "pgm"]
    sweep = rows(tmp_path / "rho_sweep.csv")
    assert [float(r["rho_db"]) for r in sweep] == TINY_SWEEP
    assert {r["config_hash"] for r in table + sweep} == {h}
    assert len(rows(tmp_path / "robustness.csv")) == 3
    for name in ("frequency_response.csv", "evegan_curves.csv", "pgm_curves.csv", "rho_sweep.png",
                 "summary.json"):
        assert (tmp_path / name).exists(), name
    assert json.loads((tmp_path / "summary.json").read_text())["config_hash"] == h


TINY_SWEEP = [6.0, 11.0, 16.0, 21.0, 26.0]
