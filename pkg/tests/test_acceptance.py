"""Acceptance gates. Each test covers one criterion and reports a PASS/FAIL line.

The desk-scale run behind criteria 6 to 10 uses the default config and takes
several minutes on one CPU core.
"""

import csv
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import signal

from vibguard import channel as ch
from vibguard import dsp
from vibguard import experiment as ex
from vibguard import metrics as M
from vibguard import pgm as P
from vibguard import surrogates as S
from vibguard import translator as T
from vibguard.cli import main
from vibguard.config import load_config
from vibguard.dsp import AudioBuffer
from vibguard.nn import (ConvTranspose1d, Conv1d, InstanceNorm, Linear, Tensor, concat, grad_check,
                         module_grad_check)
from vibguard.nn import functional as F

RATE = 16000


def speechlike(n=RATE, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / RATE
    x = sum(a * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f, a in ((170, 0.3), (650, 0.2), (2400, 0.05)))
    return AudioBuffer(x * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t)) + rng.standard_normal(n) * 0.003, RATE)


def note(record_property, detail):
    record_property("detail", detail)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = load_config()
    t0 = time.perf_counter()
    summary = ex.run_desk(cfg, out)
    return cfg, summary, out, time.perf_counter() - t0


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "DSP property suite")
def test_dsp_property_suite(record_property):
    t0 = time.perf_counter()
    worst_parseval = 0.0
    for seed, (fft, hop) in itertools.product(range(5), [(256, 64), (512, 128), (1024, 256)]):
        body = np.random.default_rng(seed).standard_normal(fft * 6)
        x = np.concatenate([np.zeros(fft), body, np.zeros(fft)])
        e = np.sum(x ** 2)
        worst_parseval = max(worst_parseval, abs(dsp.spectral_energy(dsp.stft(AudioBuffer(x, RATE), fft, hop)) - e) / e)

    x = AudioBuffer(np.random.default_rng(3).standard_normal(RATE) * 0.3, RATE)
    y = dsp.istft(dsp.stft(x, 1024, 256))
    istft_err = np.max(np.abs(y.samples[1024:-1024] - x.samples[1024:-1024]))

    sections = dsp.design_lowpass_cascade(500, RATE, 4)
    f = np.linspace(400, 600, 20001)
    _, h = signal.sosfreqz(np.stack([s.sos() for s in sections]), worN=f, fs=RATE)
    f3 = f[np.argmin(np.abs(20 * np.log10(np.abs(h)) + 3.0103))]
    g2k = 20 * math.log10(abs(dsp.cascade_response(sections, [2000.0], RATE)[0]))

    rng = np.random.default_rng(7)
    snr_err = 0.0
    for rho in (-10.0, 0.0, 16.0, 26.0, 40.0):
        ref = AudioBuffer(rng.standard_normal(4000) * rng.uniform(0.01, 1), RATE)
        pert = AudioBuffer(rng.standard_normal(4000) * rng.uniform(0.01, 1), RATE)
        snr_err = max(snr_err, abs(dsp.snr_db(ref, dsp.snr_normalize(pert, ref, rho)) - rho))

    b = signal.firwin(511, 7000, fs=RATE)
    z = np.convolve(np.random.default_rng(1).standard_normal(RATE), b, mode="same")
    a = AudioBuffer(z / np.max(np.abs(z)) * 0.5, RATE)
    back = dsp.resample(dsp.resample(a, 48000), RATE)
    core = slice(1000, -1000)
    rt_snr = dsp.snr_db(a.samples[core], back.samples[core] - a.samples[core])
    elapsed = time.perf_counter() - t0

    note(record_property, f"parseval {worst_parseval:.1e}, istft {istft_err:.1e}, f3 {f3:.1f} Hz, "
                          f"2 kHz {g2k:.1f} dB, snr {snr_err:.1e} dB, resample {rt_snr:.1f} dB, {elapsed:.1f} s")
    assert worst_parseval < 1e-4
    assert istft_err < 1e-6
    assert abs(f3 - 500) <= 10 and g2k < -45
    assert snr_err < 1e-6
    assert rt_snr > 40
    assert elapsed < 60


# ------------------------------------------------------------------ 2


def _rnd(*shape, seed=0, scale=1.0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape) * scale, requires_grad=True)


def _gradient_suite():
    rng = np.random.default_rng(0)
    checks = {}
    checks["linear"] = module_grad_check(Linear(5, 3, rng), [_rnd(4, 5)], h=1e-5)
    checks["conv1d"] = module_grad_check(Conv1d(3, 4, 5, rng, stride=2), [_rnd(2, 3, 16)], h=1e-5)
    checks["conv_transpose"] = module_grad_check(ConvTranspose1d(3, 2, 4, rng, stride=2), [_rnd(2, 3, 16)], h=1e-5)
    checks["instance_norm"] = module_grad_check(InstanceNorm(3), [_rnd(2, 3, 10)], h=1e-5)
    x, s, b = _rnd(2, 3, 10), _rnd(2, 3, seed=4), _rnd(2, 3, seed=5)
    checks["adain"] = grad_check(lambda: F.adain(x, s, b), {"x": x, "s": s, "b": b}, h=1e-5)
    sig = _rnd(2, 64, seed=6)
    sos = signal.butter(4, 0.2, output="sos")
    taps = _rnd(2, 4, 5, seed=9)
    checks["fixed_filters"] = grad_check(lambda: F.sosfilt(sig, sos) + F.tv_fir(sig, taps, 16),
                                         {"x": sig, "taps": taps}, h=1e-5)

    # Eve-GAN losses
    pr = Tensor(rng.uniform(0.1, 0.9, 3), requires_grad=True)
    pf = Tensor(rng.uniform(0.1, 0.9, 3), requires_grad=True)
    checks["gan"] = grad_check(lambda: T.gan_objective([pr], [pf])[0], {"real": pr, "fake": pf}, h=1e-6)
    tm = T.TranslatorModel(np.random.default_rng(3), style_dim=8)
    tm.noise_log_scale.data[:] = -60.0  # the sensor noise is keyed on the input bytes; mute it
    xa = _rnd(1, 640, seed=7, scale=0.05)
    checks["consistency"] = grad_check(lambda: T.consistency_loss(tm, xa), {"x": xa}, h=1e-6)
    disc = T.EveDiscriminator(np.random.default_rng(0))
    u = _rnd(1, 800, seed=1, scale=0.05)
    v = Tensor(np.random.default_rng(2).standard_normal((1, 800)) * 0.05)
    checks["feature_matching"] = grad_check(lambda: T.feature_matching_loss(disc, u, v), {"u": u}, h=1e-6)

    # generator losses
    mu, sg = _rnd(3, 4), Tensor(rng.uniform(0.5, 2, (3, 4)), requires_grad=True)
    checks["kl"] = grad_check(lambda: P.kl_loss(mu, sg), {"mu": mu, "sigma": sg}, h=1e-6)
    clf = S.DigitClassifier(np.random.default_rng(1), 6, 3)
    rec = S.CtcRecognizer(np.random.default_rng(2), 6)
    tr = _rnd(2, 4000, seed=3, scale=0.1)
    checks["ensemble"] = grad_check(lambda: P.ensemble_loss([P.Surrogate(rec, clf)], tr, [[3], [5]], np.array([3, 5])),
                                    {"translated": tr}, h=1e-6)
    xo, to = Tensor(speechlike(4000).samples[None]), Tensor(speechlike(3000, 1).samples[None])
    xp, tp = _rnd(1, 4000, seed=4, scale=0.1), _rnd(1, 3000, seed=5, scale=0.1)
    checks["reconstruction"] = grad_check(lambda: P.reconstruction_loss(xo, xp, to, tp), {"xp": xp, "tp": tp}, h=1e-6)
    pd = P.PlaybackDiscriminator(np.random.default_rng(1))
    checks["adversarial"] = grad_check(lambda: P.adversarial_loss_pgm(pd, xo, xp)[0], {"xp": xp}, h=1e-6)
    z = _rnd(2, 6, 5)
    checks["ctc"] = grad_check(lambda: S.ctc_loss(F.log_softmax(z, axis=-1), [[1, 2], [3]]), {"z": z}, h=1e-5)

    # whole stacks, every parameter
    cfg = P.PgmConfig(hidden=16, latent_dim=8, n_mels=8, lfap_hidden=16, lfap_length=128)
    gen = P.PerturbationGenerator(np.random.default_rng(1), cfg)
    gen.fir.fir_head.weight.data *= 30  # leave the flat regime so every path carries gradient
    xs = Tensor(speechlike(1600, 2).samples[None] * 0.5)
    eps, zc = P.segment_latents(0, 0, 2, cfg.latent_dim)
    checks["generator_stack"] = grad_check(lambda: gen(xs, eps, zc)[0], dict(gen.named_parameters()), h=1e-6)
    ref = Tensor(np.random.default_rng(9).standard_normal((1, 320)) * 0.01)
    checks["translator_stack"] = grad_check(lambda: tm(xa, ref), dict(tm.named_parameters()), h=1e-6)
    checks["eve_discriminator_stack"] = grad_check(lambda: concat([p.reshape(-1) for p in disc(u)[0]], axis=0),
                                                   dict(disc.named_parameters()), h=1e-6)
    checks["playback_discriminator_stack"] = module_grad_check(pd, [Tensor(xo.data)], h=1e-6)
    checks["classifier_stack"] = module_grad_check(clf, [Tensor(tr.data)], h=1e-6)
    checks["recognizer_stack"] = module_grad_check(rec, [Tensor(tr.data)], h=1e-6)
    return checks


@pytest.mark.criterion(2, "gradient checks < 1e-3")
def test_gradient_checks(record_property):
    t0 = time.perf_counter()
    checks = _gradient_suite()
    elapsed = time.perf_counter() - t0
    worst = max(checks, key=lambda k: checks[k].max_error)
    note(record_property, f"{len(checks)} checks, worst {worst} {checks[worst].max_error:.1e}, {elapsed:.0f} s")
    failed = {k: str(r) for k, r in checks.items() if r.max_error >= 1e-3}
    assert not failed, failed
    assert elapsed < 300


# ------------------------------------------------------------------ 3


def _collapse(path):
    out, prev = [], None
    for s in path:
        if s != prev and s != S.BLANK:
            out.append(s)
        prev = s
    return out


@pytest.mark.criterion(3, "closed-form loss oracles")
def test_closed_form_oracles(record_property):
    half = [Tensor(np.array([0.5]))]
    gan = T.gan_objective(half, half)[0].item()
    kl = P.kl_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0))).item()

    lp = np.log(np.random.default_rng(1).dirichlet(np.ones(5), size=2))
    ctc1 = S.ctc_forward_backward(lp[:1], [3])[0]
    # every two-frame path that collapses to [2]
    total = sum(math.exp(lp[0, a] + lp[1, b]) for a in range(5) for b in range(5) if _collapse((a, b)) == [2])
    ctc2 = S.ctc_forward_backward(lp, [2])[0]

    c = np.zeros((10, 24))
    d = c.copy()
    d[:, 0] = 1.0
    mcd = float(M.mcd_from_cepstra(c, d).mean())
    note(record_property, f"gan {gan:.6f}, kl {kl}, ctc1 err {abs(ctc1 + lp[0, 3]):.1e}, "
                          f"ctc2 err {abs(ctc2 + math.log(total)):.1e}, mcd {mcd:.4f}")
    assert gan == pytest.approx(-1.3863, abs=1e-4) and gan == pytest.approx(2 * math.log(0.5), abs=1e-6)
    assert kl == pytest.approx(0.5, abs=1e-9)
    assert ctc1 == pytest.approx(-lp[0, 3], abs=1e-9)
    assert ctc2 == pytest.approx(-math.log(total), abs=1e-9)
    assert mcd == pytest.approx(6.1418, abs=1e-3)


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4, "channel fidelity")
def test_channel_fidelity(record_property):
    t0 = time.perf_counter()
    worst_probe = 0.0
    for sensor in ("mmwave", "optical"):
        chan = ch.build_channel(ch.ScenarioVector(sensor=sensor))
        freqs = np.array([f for f, _ in chan.anchors if 20 < f < chan.sensor_rate / 2 * 0.95] + [30.0])
        f, g = ch.probe_frequency_response(chan, freqs)
        worst_probe = max(worst_probe, float(np.max(np.abs(g - chan.gain_db(f)))))

    acc = ch.build_channel(ch.ScenarioVector(sensor="accelerometer"))
    worst_acc = -np.inf
    for seed in range(5):
        x = AudioBuffer(np.random.default_rng(seed).standard_normal(RATE) * 0.1, RATE)
        # the sensor stream is 500 Hz, so check the band just below Nyquist at its native rate
        y = ch.apply_channel(x, acc, seed=seed).samples
        rel = 10 * math.log10(dsp.band_energy(y, 500, 240, 251) / dsp.band_energy(y, 500, 0, 251))
        worst_acc = max(worst_acc, rel)
    gain_gap = float(acc.gain_db(np.linspace(250, 2000, 50)).max() - acc.gain_db(100.0))

    mm = ch.build_channel(ch.ScenarioVector())
    out = ch.apply_channel(dsp.tone(3000.0, 2.0, RATE), mm, seed=2).samples[2000:-2000]  # skip onsets
    amp, resid = dsp.fit_tone(out, mm.sensor_rate, 3000.0)
    snr3k = 10 * math.log10(amp ** 2 / 2 / np.mean(resid ** 2))
    elapsed = time.perf_counter() - t0
    note(record_property, f"probe max err {worst_probe:.2f} dB, accelerometer edge {worst_acc:.1f} dB "
                          f"(curve {gain_gap:.0f} dB), mmWave 3 kHz SNR {snr3k:.2f} dB, {elapsed:.1f} s")
    assert worst_probe <= 1.0
    assert worst_acc < -40 and gain_gap < -40
    assert snr3k <= 2.0 and abs(snr3k) <= 2.0
    assert elapsed < 60


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "LFAP band confinement and exact SNR")
def test_lfap_confinement(record_property):
    cfg = P.PgmConfig()
    ref = speechlike(RATE, 4)
    worst_frac, worst_snr = 0.0, 0.0
    for state in range(100):
        gen = P.LfapGenerator(np.random.default_rng(state), cfg)
        z = np.random.default_rng(1000 + state).standard_normal(cfg.latent_dim)
        p = P.generate_lfap(gen, z, ref).samples
        spec = np.abs(np.fft.rfft(p)) ** 2
        f = np.fft.rfftfreq(len(p), 1 / RATE)
        worst_frac = max(worst_frac, spec[f > 700].sum() / spec.sum())
        snr = 10 * math.log10(np.mean(ref.samples ** 2) / np.mean(p ** 2))
        worst_snr = max(worst_snr, abs(snr - 16.0))
    note(record_property, f"worst fraction above 700 Hz {worst_frac:.1e}, worst SNR error {worst_snr:.1e} dB")
    assert worst_frac < 1e-4
    assert worst_snr < 1e-6


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "Eve-GAN SSIM trend")
def test_evegan_trend(desk, record_property):
    cfg, s, _, _ = desk
    grid = ex.scenario_grid(cfg)
    t = s["timings_s"]["evegan"] + s["timings_s"]["simulate"]
    note(record_property, f"SSIM trained {s['ssim_trained']:.3f}, untrained {s['ssim_untrained']:.3f}, "
                          f"{len(grid)} scenarios, {t:.0f} s")
    assert len(grid) == 72 and all(z.sensor == "mmwave" for z in grid)
    assert s["ssim_trained"] >= 0.85
    assert s["ssim_trained"] - s["ssim_untrained"] >= 0.15
    assert t < 1800


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "end-to-end defense trend")
def test_defense_trend(desk, record_property):
    cfg, s, _, elapsed = desk
    table = {r["defense"]: r for r in s["table"]}
    none, noise, pgm = table["none"], table["gaussian"], table["pgm"]
    note(record_property, f"DDR clean {none['ddr']:.3f}, perturbed {pgm['ddr']:.3f}; MCD {pgm['mcd']:.2f} "
                          f"vs baseline {none['mcd']:.2f}; LSD {pgm['lsd_db']:.2f} vs noise {noise['lsd_db']:.2f} dB; "
                          f"{elapsed:.0f} s")
    assert none["ddr"] >= 0.80 - 0.05
    assert pgm["ddr"] <= 0.20 + 0.05
    assert pgm["mcd"] >= 2 * none["mcd"]
    assert pgm["lsd_db"] < noise["lsd_db"]
    assert noise["snr_db"] == pytest.approx(pgm["snr_db"], abs=1e-9)  # equal SNR
    assert elapsed < 3600


# ------------------------------------------------------------------ 8


def _monotone_down(values, tol=0.05):
    rises = [(a, b) for a, b in zip(values, values[1:]) if b > a]
    return len(rises) <= 1 and all(b - a <= tol * abs(a) for a, b in rises)


@pytest.mark.criterion(8, "rho sweep non-increasing")
def test_rho_sweep(desk, record_property):
    _, s, _, _ = desk
    sweep = s["rho_sweep"]
    rho = [r["rho_db"] for r in sweep]
    mcd = [r["mcd"] for r in sweep]
    lsd = [r["lsd_db"] for r in sweep]
    note(record_property, "MCD " + " ".join(f"{v:.2f}" for v in mcd) + "; LSD " + " ".join(f"{v:.3f}" for v in lsd))
    assert rho == [6.0, 11.0, 16.0, 21.0, 26.0]
    assert _monotone_down(mcd)
    assert _monotone_down(lsd)


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9, "robustness report keeps MCD >= 8")
def test_robustness(desk, record_property):
    _, s, out, _ = desk
    rows = s["robustness"]
    note(record_property, ", ".join(f"{r['transform']} {r['mcd']:.1f}" for r in rows))
    names = [r["transform"] for r in rows]
    assert "quantize_8bit" in names and any(n.startswith("resample_") for n in names)
    assert (out / "robustness.csv").exists()
    # a failing row renders in the diff table
    fake = [{"transform": "demo", "mcd": 7.0, "line": 8.0, "passed": False}]
    assert "demo" in ex.diff_table(fake) and "1.000" in ex.diff_table(fake)
    assert all(r["mcd"] >= 8.0 for r in rows), ex.diff_table(rows)


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10, "streaming latency < 50 ms per 50 ms segment")
def test_streaming_latency(desk, tmp_path, record_property):
    _, _, out, _ = desk
    src = tmp_path / "speech.wav"
    dsp.write_wav(src, speechlike(RATE, 9), "FLOAT")
    res = CliRunner().invoke(main, ["perturb", str(src), str(tmp_path / "o.wav"),
                                    "--checkpoint", str(out / "pgm" / "pgm.ckpt")])
    assert res.exit_code == 0, res.output
    with open(tmp_path / "o.latency.csv", newline="") as fh:
        lat = np.array([float(r["latency_ms"]) for r in csv.DictReader(fh)])
    note(record_property, f"{len(lat)} segments, median {np.median(lat):.2f} ms, max {lat.max():.2f} ms")
    assert len(lat) == 20
    assert lat.max() < 50.0


# ------------------------------------------------------------------ 11


TINY = {
    "corpus.n_per_digit": 10, "grid.samples_per_scenario": 1, "evegan.steps": 4, "evegan.batch": 4,
    "surrogates.classifier_widths": [8], "surrogates.classifier_steps": 20, "surrogates.recognizer_steps": 5,
    "surrogates.defender_views": 1, "pgm.k_surrogates": 1, "pgm.steps": 4, "pgm.batch": 2, "eval.views": 1,
}


def _tree(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "summary.json":
                doc = json.loads(data)
                doc.pop("timings_s", None)
                doc.pop("total_s", None)
                data = json.dumps(doc, sort_keys=True).encode()
            out[str(p.relative_to(root))] = data
    return out


@pytest.mark.criterion(11, "bit-identical reruns")
def test_determinism(tmp_path, record_property):
    cfg = load_config(None, TINY)
    trees = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        ex.run_desk(cfg, out)
        src = tmp_path / "in.wav"
        dsp.write_wav(src, speechlike(RATE, 5), "FLOAT")
        res = CliRunner().invoke(main, ["perturb", str(src), str(out / "perturbed.wav"), "--seed", "3",
                                        "--checkpoint", str(out / "pgm" / "pgm.ckpt")])
        assert res.exit_code == 0, res.output
        (out / "perturbed.latency.csv").unlink()  # wall-clock timings differ by nature
        trees.append(_tree(out))
    a, b = trees
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ckpts = [k for k in a if k.endswith(".ckpt")]
    note(record_property, f"{len(a)} files compared ({len(ckpts)} checkpoints), {len(differ)} differ")
    assert len(ckpts) >= 6
    assert not differ, differ
