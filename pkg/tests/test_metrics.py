import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibguard import dsp, metrics as M
from vibguard.dsp import AudioBuffer
from vibguard.errors import InvalidInputError

RATE = 16000


def noise(n=RATE, seed=0, scale=0.1):
    return AudioBuffer(np.random.default_rng(seed).standard_normal(n) * scale, RATE)


def voiced(seed=0, n=RATE):
    # Harmonic-rich clip with a slowly moving envelope.
    rng = np.random.default_rng(seed)
    t = np.arange(n) / RATE
    f0 = rng.uniform(100, 200)
    x = sum(np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 6)) / k for k in range(1, 20))
    return AudioBuffer(0.05 * x * (1.2 + np.sin(2 * np.pi * 3 * t)), RATE)


def tone_level_db(x, rate, freq):
    amp, _ = dsp.fit_tone(x, rate, freq)
    return 20 * math.log10(amp)


# ------------------------------------------------------------------- MCD


def test_mcd_unit_difference_in_one_dimension():
    c = np.zeros((10, 24))
    d = c.copy()
    d[:, 5] = 1.0
    per_frame = M.mcd_from_cepstra(c, d)
    np.testing.assert_allclose(per_frame, 10 / math.log(10) * math.sqrt(2), atol=1e-12)
    assert float(per_frame.mean()) == pytest.approx(6.1418, abs=1e-3)


def test_mcd_identical_is_zero():
    a = voiced()
    assert M.mcd(a, a) == 0.0


def test_mcd_ignores_global_gain():
    # Broadband content keeps every mel band above the log floor.
    a = AudioBuffer(voiced(0).samples + noise(seed=7, scale=1e-3).samples, RATE)
    b = AudioBuffer(voiced(1).samples + noise(seed=8, scale=1e-3).samples, RATE)
    base = M.mcd(a, b)
    scaled = M.mcd(a, b.with_samples(b.samples * 3.7))
    assert scaled == pytest.approx(base, abs=1e-3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_mcd_is_symmetric(s1, s2):
    a, b = noise(4000, s1), noise(4000, s2 + 10 ** 7)
    assert M.mcd(a, b) == pytest.approx(M.mcd(b, a), rel=1e-12)


def test_mcd_length_rules():
    a = voiced()
    M.mcd(a, a.with_samples(a.samples[:-100]))  # within one hop
    with pytest.raises(InvalidInputError):
        M.mcd(a, a.with_samples(a.samples[:-2000]))
    with pytest.raises(InvalidInputError):
        M.mcd(a, AudioBuffer(a.samples, 8000))


def test_mcd_dtw_undoes_a_delay():
    a = voiced(3)
    shifted = a.with_samples(np.concatenate([np.zeros(800), a.samples[:-800]]))
    assert M.mcd(a, shifted, dtw=True) < M.mcd(a, shifted)


# ------------------------------------------------------------------- WER


def brute_levenshtein(a, b):
    # Independent recursion with memoisation.
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_wer_examples():
    assert M.wer("a b c", "a b c") == 0.0
    assert M.wer("a b c", "a b") == pytest.approx(1 / 3)
    assert M.wer(["one"], ["two", "three"]) == 2.0
    with pytest.raises(InvalidInputError):
        M.wer("", "a")


words = st.lists(st.sampled_from("abcd"), max_size=7)


@settings(max_examples=200)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=7), words)
def test_wer_matches_brute_force(ref, hyp):
    assert M.wer(ref, hyp) == brute_levenshtein(tuple(ref), tuple(hyp)) / len(ref)


@settings(max_examples=100)
@given(words, words, words)
def test_edit_distance_is_a_metric(a, b, c):
    assert M.edit_distance(a, b) >= 0
    assert (M.edit_distance(a, b) == 0) == (a == b)
    assert M.edit_distance(a, b) == M.edit_distance(b, a)
    assert M.edit_distance(a, c) <= M.edit_distance(a, b) + M.edit_distance(b, c)


# ------------------------------------------------------------------ SSIM


def brute_ssim(x, y, win=8, data_range=1.0):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            a = x[i:i + win, j:j + win].ravel()
            b = y[i:i + win, j:j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = a.var(), b.var()
            cov = np.mean((a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 5))
def test_ssim_matches_window_loop(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.random((20, 17))
    y = np.roll(x, shift, axis=1) * 0.7 + 0.3 * rng.random((20, 17))
    assert M.ssim_2d(x, y) == pytest.approx(brute_ssim(x, y), abs=1e-6)


def test_ssim_identity_and_inversion():
    x = np.random.default_rng(1).random((16, 16))
    assert M.ssim_2d(x, x) == pytest.approx(1.0)
    assert M.ssim_2d(x, 1.0 - x) < 0


def test_ssim_shape_errors():
    with pytest.raises(InvalidInputError):
        M.ssim_2d(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(InvalidInputError):
        M.ssim_2d(np.zeros((4, 4)), np.zeros((4, 4)))


def test_spectrogram_ssim_identity_and_mismatch():
    s = dsp.stft(voiced(), 256, 64)
    assert M.spectrogram_ssim(s, s) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        M.spectrogram_ssim(s, dsp.stft(voiced(n=8000), 256, 64))


def test_audio_ssim_ranks_similarity():
    a = voiced(0)
    near = a.with_samples(a.samples + np.random.default_rng(1).standard_normal(len(a)) * 1e-4)
    far = voiced(5)
    assert M.audio_ssim(a, near) > 0.9 > M.audio_ssim(a, far)


# ------------------------------------------------------------------- LSD


def test_lsd_matches_bin_loop():
    a, b = voiced(0), noise(RATE, 2)
    pa = dsp.stft(a).magnitudes ** 2
    pb = dsp.stft(b).magnitudes ** 2
    frames = []
    for fa, fb in zip(pa, pb):
        acc = 0.0
        for u, v in zip(fa, fb):
            acc += (10 * math.log10(max(u, dsp.LOG_FLOOR) / max(v, dsp.LOG_FLOOR))) ** 2
        frames.append(math.sqrt(acc / len(fa)))
    assert M.lsd(a, b) == pytest.approx(sum(frames) / len(frames), abs=1e-9)


def test_lsd_examples():
    a = noise()
    assert M.lsd(a, a) == 0.0
    assert M.lsd(a, a.with_samples(np.zeros(len(a)))) > 50


# ------------------------------------------------------------ transforms


def test_quantize_error_bound_over_every_cell():
    # Every 8-bit cell, probed at its centre and both edges.
    step = 2.0 ** -7
    centres = np.arange(-128, 128) * step
    x = np.concatenate([centres, centres + step / 2 - 1e-12, centres - step / 2 + 1e-12])
    x = np.clip(x, -1, 1 - step)
    q = M.transform_quantize(AudioBuffer(x, RATE), 8).samples
    assert np.max(np.abs(q - x)) <= 2.0 ** -8


def test_quantize_pcm16_identity_and_silence(tmp_path):
    a = noise(2000, 4, 0.3)
    dsp.write_wav(tmp_path / "a.wav", a, "PCM16")
    pcm = dsp.read_wav(tmp_path / "a.wav")
    assert np.array_equal(M.transform_quantize(pcm, 16).samples, pcm.samples)
    z = AudioBuffer(np.zeros(100), RATE)
    assert np.array_equal(M.transform_quantize(z, 8).samples, z.samples)
    with pytest.raises(InvalidInputError):
        M.transform_quantize(z, 0)


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.integers(2, 16))
def test_quantize_is_idempotent(seed, bits):
    a = noise(500, seed, 0.4)
    once = M.transform_quantize(a, bits)
    assert np.array_equal(M.transform_quantize(once, bits).samples, once.samples)


def test_resample_roundtrip_identity_and_length():
    a = noise(1234)
    assert np.array_equal(M.transform_resample_roundtrip(a, RATE).samples, a.samples)
    assert len(M.transform_resample_roundtrip(a, 4000)) == 1234


def test_resample_roundtrip_keeps_low_band_and_drops_high():
    sweep = dsp.sweep_tone(50, 3500, 2.0, RATE)
    out = M.transform_resample_roundtrip(sweep, 8000).samples
    inner = slice(1000, -1000)
    err = out[inner] - sweep.samples[inner]
    assert 10 * math.log10(np.mean(sweep.samples[inner] ** 2) / np.mean(err ** 2)) > 30
    hi = dsp.tone(6000, 1.0, RATE)
    gone = M.transform_resample_roundtrip(hi, 8000).samples
    assert np.mean(gone[1000:-1000] ** 2) < 1e-6


def test_shelf_filter_tone_oracles():
    low = dsp.tone(100, 1.0, RATE, 0.5)
    out = M.transform_shelf_filter(low, 300, None, 20).samples[4000:]
    assert tone_level_db(out, RATE, 100) - 20 * math.log10(0.5) == pytest.approx(-20, abs=1.0)
    mid = dsp.tone(1000, 1.0, RATE, 0.5)
    out = M.transform_shelf_filter(mid, 300, None, 20).samples[4000:]
    assert tone_level_db(out, RATE, 1000) - 20 * math.log10(0.5) == pytest.approx(0, abs=0.5)
    hi = dsp.tone(6000, 1.0, RATE, 0.5)
    out = M.transform_shelf_filter(hi, None, 2000, 20).samples[4000:]
    assert tone_level_db(out, RATE, 6000) - 20 * math.log10(0.5) == pytest.approx(-20, abs=1.0)


def test_shelf_filter_zero_attenuation_is_identity():
    a = noise(3000)
    np.testing.assert_allclose(M.transform_shelf_filter(a, 300, 3000, 0).samples, a.samples, atol=1e-6)


# --------------------------------------------------------------- reports


def test_metric_report_validation():
    with pytest.raises(InvalidInputError):
        M.MetricReport(wer=-0.1)
    with pytest.raises(InvalidInputError):
        M.MetricReport(ddr=1.5)
    with pytest.raises(InvalidInputError):
        M.MetricReport(ssim=2.0)
    assert M.MetricReport(mcd=5.0).recognizable
    assert not M.MetricReport(mcd=9.0).recognizable


def test_reports_ledger_appends(tmp_path):
    p = tmp_path / "r.csv"
    M.append_reports(p, [M.MetricReport(mcd=1.0, label="a", scenario={"sensor": "mmwave"})], "h1")
    M.append_reports(p, [M.MetricReport(mcd=2.0, label="b")], "h1")
    rows = M.read_reports(p)
    assert [r["label"] for r in rows] == ["a", "b"]
    assert rows[0]["config_hash"] == "h1" and '"mmwave"' in rows[0]["scenario"]
    assert p.read_text().count("label,mcd") == 1


def test_summary_json_carries_hash(tmp_path):
    import json

    M.write_summary(tmp_path / "s.json", {"x": np.float64(1.5)}, "abc")
    assert json.loads((tmp_path / "s.json").read_text()) == {"x": 1.5, "config_hash": "abc"}
