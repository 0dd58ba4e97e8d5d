import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from vibguard import dsp
from vibguard.dsp import AudioBuffer
from vibguard.errors import DegenerateInputError, InvalidInputError

RATE = 16000


def noise(n, seed=0, rate=RATE):
    return AudioBuffer(np.random.default_rng(seed).standard_normal(n) * 0.1, rate)


# ------------------------------------------------------------ AudioBuffer


def test_audio_buffer_rejects_nonfinite_and_bad_rate():
    with pytest.raises(InvalidInputError):
        AudioBuffer([0.0, np.nan], RATE)
    with pytest.raises(InvalidInputError):
        AudioBuffer([0.0], 0)
    with pytest.raises(InvalidInputError):
        AudioBuffer([0.0], 1.5)


def test_audio_buffer_is_immutable_and_reports_duration():
    a = AudioBuffer(np.zeros(8000), RATE)
    assert a.duration == 0.5
    with pytest.raises(ValueError):
        a.samples[0] = 1.0


# ------------------------------------------------------------------ STFT


def test_stft_peak_bin_of_440hz_sine():
    spec = dsp.stft(dsp.tone(440, 0.5, RATE), 1024, 256)
    assert int(np.argmax(spec.magnitudes.mean(axis=0))) == 28


def test_stft_of_zeros_is_zero():
    assert not np.any(dsp.stft(AudioBuffer(np.zeros(4096), RATE)).magnitudes)


def test_stft_rejects_short_audio_and_bad_sizes():
    with pytest.raises(InvalidInputError):
        dsp.stft(AudioBuffer(np.zeros(100), RATE), 1024, 256)
    with pytest.raises(InvalidInputError):
        dsp.stft(noise(4096), 1000, 250)
    with pytest.raises(InvalidInputError):
        dsp.stft(noise(4096), 1024, 0)


def test_istft_roundtrip_interior_on_white_noise():
    x = noise(16000, seed=3)
    y = dsp.istft(dsp.stft(x, 1024, 256))
    assert len(y) == len(x)
    interior = slice(1024, len(x) - 1024)
    assert np.max(np.abs(y.samples[interior] - x.samples[interior])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(256, 64), (512, 128), (1024, 256)]))
def test_parseval_with_quarter_hop_hann(seed, sizes):
    fft, hop = sizes
    body = np.random.default_rng(seed).standard_normal(fft * 6)
    # a frame of silence each side puts every non-zero sample under a full window overlap
    x = np.concatenate([np.zeros(fft), body, np.zeros(fft)])
    spec = dsp.stft(AudioBuffer(x, RATE), fft, hop)
    energy = np.sum(x ** 2)
    assert abs(dsp.spectral_energy(spec) - energy) / energy < 1e-4


# ------------------------------------------------------------ resampling


def test_resample_identity_rate_returns_same_buffer():
    x = noise(1000)
    assert dsp.resample(x, RATE) is x


def test_resample_keeps_1khz_sine_amplitude():
    y = dsp.resample(dsp.tone(1000, 1.0, RATE), 8000)
    amp, _ = dsp.fit_tone(y.samples[400:-400], 8000, 1000)
    assert abs(20 * math.log10(amp)) < 0.5


def test_resample_suppresses_content_above_new_nyquist():
    x = dsp.tone(5000, 1.0, RATE)
    y = dsp.resample(x, 8000)
    ratio = np.sum(y.samples[200:-200] ** 2) / np.sum(x.samples ** 2) * 2
    assert 10 * math.log10(ratio + 1e-30) < -40


def test_resample_roundtrip_48k_snr():
    rng = np.random.default_rng(1)
    # band-limited below 7 kHz
    b = signal.firwin(511, 7000, fs=RATE)
    x = np.convolve(rng.standard_normal(RATE), b, mode="same")
    a = AudioBuffer(x / np.max(np.abs(x)) * 0.5, RATE)
    back = dsp.resample(dsp.resample(a, 48000), RATE)
    core = slice(1000, -1000)
    assert dsp.snr_db(a.samples[core], back.samples[core] - a.samples[core]) > 40


def test_resample_rejects_bad_rate():
    with pytest.raises(InvalidInputError):
        dsp.resample(noise(100), 0)


# ---------------------------------------------------------------- biquads


@settings(max_examples=40, deadline=None)
@given(st.floats(20, 7900), st.floats(0.3, 4.0))
def test_lowpass_unit_dc_gain_and_stable(cutoff, q):
    c = dsp.design_lowpass_biquad(cutoff, RATE, q)
    assert abs(c.response([0.0], RATE)[0] - 1.0) < 1e-9
    assert c.is_stable()


def test_lowpass_minus_3db_at_cutoff_against_freqz():
    c = dsp.design_lowpass_biquad(500, RATE)
    _, h = signal.freqz([c.b0, c.b1, c.b2], [1, c.a1, c.a2], worN=[500.0], fs=RATE)
    assert abs(20 * np.log10(abs(h[0])) + 3.0103) < 0.1
    assert abs(abs(c.response([500.0], RATE)[0]) - abs(h[0])) < 1e-12


def test_cascade_minus_3db_point_and_stopband():
    sections = dsp.design_lowpass_cascade(500, RATE, 4)
    f = np.linspace(400, 600, 20001)
    _, h = signal.sosfreqz(np.stack([s.sos() for s in sections]), worN=f, fs=RATE)
    db = 20 * np.log10(np.abs(h))
    f3 = f[np.argmin(np.abs(db + 3.0103))]
    assert abs(f3 - 500) < 10
    g2k = 20 * np.log10(abs(dsp.cascade_response(sections, [2000.0], RATE)[0]))
    assert g2k < -45


def test_single_section_mode_is_plain_butterworth_biquad():
    (s,) = dsp.design_lowpass_cascade(500, RATE, 1)
    assert s == dsp.design_lowpass_biquad(500, RATE, 1 / math.sqrt(2))


def test_lowpass_rejects_cutoff_at_nyquist():
    with pytest.raises(InvalidInputError):
        dsp.design_lowpass_biquad(8000, RATE)


def test_apply_biquads_matches_lfilter():
    c = dsp.design_lowpass_biquad(800, RATE)
    x = noise(2000)
    y = dsp.apply_biquads(x, [c])
    ref = signal.lfilter([c.b0, c.b1, c.b2], [1, c.a1, c.a2], x.samples)
    assert np.max(np.abs(y.samples - ref)) < 1e-12


def test_shelf_far_gain():
    low = dsp.design_shelf_biquad("low", 300, RATE, -20)
    assert abs(20 * np.log10(abs(low.response([1.0], RATE)[0])) + 20) < 0.1
    assert abs(20 * np.log10(abs(low.response([7000.0], RATE)[0]))) < 0.1


# ------------------------------------------------------ time-varying FIR


def test_tv_fir_unit_impulse_is_identity():
    x = noise(800)
    taps = np.zeros((5, 9))
    taps[:, 4] = 1.0
    y = dsp.apply_time_varying_fir(x, dsp.TimeVaryingFir(taps, 160))
    assert len(y) == len(x)
    assert np.max(np.abs(y.samples - x.samples)) < 1e-15


def test_tv_fir_scalar_half():
    x = noise(800)
    y = dsp.apply_time_varying_fir(x, dsp.TimeVaryingFir(np.full((5, 1), 0.5), 160))
    assert np.allclose(y.samples, 0.5 * x.samples, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([1, 3, 9, 17]))
def test_tv_fir_constant_frames_equal_static_convolution(seed, n_taps):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(640)
    h = rng.standard_normal(n_taps)
    y = dsp.apply_time_varying_fir(AudioBuffer(x, RATE), dsp.TimeVaryingFir(np.tile(h, (4, 1)), 160))
    c = (n_taps - 1) // 2
    ref = np.convolve(x, h)[c : c + len(x)]
    assert np.max(np.abs(y.samples - ref)) < 1e-6


def test_tv_fir_two_frames_against_direct_overlap_add():
    x = noise(320, seed=5)
    taps = np.array([[1.0], [0.0]])
    y = dsp.apply_time_varying_fir(x, dsp.TimeVaryingFir(taps, 160))
    # oracle: direct crossfade of the two frame outputs (identity and zero)
    t = np.arange(320)
    w0 = np.clip(1 - np.abs(t - 80) / 160, 0, None)
    w0[t < 80] = 1.0
    oracle = w0 * x.samples
    assert abs(np.sum(y.samples[160:] ** 2) - np.sum(oracle[160:] ** 2)) < 1e-6
    assert np.sum(y.samples[160:] ** 2) < np.sum(x.samples[160:] ** 2)


def test_tv_fir_frame_coverage_errors():
    with pytest.raises(InvalidInputError):
        dsp.apply_time_varying_fir(noise(800), dsp.TimeVaryingFir(np.ones((4, 1)), 160))
    with pytest.raises(InvalidInputError):
        dsp.apply_time_varying_fir(noise(300), dsp.TimeVaryingFir(np.ones((4, 1)), 160))
    with pytest.raises(InvalidInputError):
        dsp.TimeVaryingFir(np.array([[np.inf]]), 160)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_tv_fir_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 40))
    taps = rng.standard_normal((2, 4, 5))
    g = rng.standard_normal((2, 40))
    gx, gt = dsp.tv_fir_backward(x, taps, 10, g)
    eps = 1e-6
    for _ in range(6):
        i = tuple(rng.integers(s) for s in x.shape)
        d = np.zeros_like(x)
        d[i] = eps
        num = (np.sum(g * dsp.tv_fir_forward(x + d, taps, 10)) - np.sum(g * dsp.tv_fir_forward(x - d, taps, 10))) / (2 * eps)
        assert abs(num - gx[i]) < 1e-6 * max(1, abs(num))
        j = tuple(rng.integers(s) for s in taps.shape)
        d = np.zeros_like(taps)
        d[j] = eps
        num = (np.sum(g * dsp.tv_fir_forward(x, taps + d, 10)) - np.sum(g * dsp.tv_fir_forward(x, taps - d, 10))) / (2 * eps)
        assert abs(num - gt[j]) < 1e-6 * max(1, abs(num))


# --------------------------------------------------------------- fading


def test_crossfade_single_segment_unchanged():
    a = noise(100)
    assert dsp.crossfade_concat([a], 10) is a


def test_crossfade_constants_stay_constant():
    segs = [AudioBuffer(np.ones(100), RATE) for _ in range(3)]
    y = dsp.crossfade_concat(segs, 20)
    assert np.max(np.abs(y.samples - 1.0)) < 1e-9
    assert len(y) == 300 - 40


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_crossfade_boundary_smoothness(seed, fade):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(100), rng.standard_normal(100)
    y = dsp.crossfade_concat([AudioBuffer(a, RATE), AudioBuffer(b, RATE)], fade).samples
    bound = 2 * max(np.max(np.abs(np.diff(a))), np.max(np.abs(np.diff(b))))
    lo, hi = 100 - fade - 1, 100 + 1
    assert np.max(np.abs(np.diff(y[lo:hi]))) <= bound + 1e-12


def test_crossfade_errors():
    with pytest.raises(InvalidInputError):
        dsp.crossfade_concat([], 4)
    with pytest.raises(InvalidInputError):
        dsp.crossfade_concat([noise(10), noise(10, rate=8000)], 4)
    with pytest.raises(InvalidInputError):
        dsp.crossfade_concat([noise(10), noise(10)], 10)


# ---------------------------------------------------------------- SNR


def test_snr_normalize_examples():
    ref = AudioBuffer(np.ones(100), RATE)
    pert = AudioBuffer(-np.ones(100), RATE)
    assert np.allclose(dsp.snr_normalize(pert, ref, 20).samples, -0.1)
    assert np.allclose(dsp.snr_normalize(pert, ref, 0).samples, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(-20, 60), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_snr_normalize_is_exact(seed, rho, s_ref, s_pert):
    rng = np.random.default_rng(seed)
    ref = AudioBuffer(rng.standard_normal(256) * s_ref, RATE)
    pert = AudioBuffer(rng.standard_normal(256) * s_pert, RATE)
    out = dsp.snr_normalize(pert, ref, rho)
    assert abs(dsp.snr_db(ref, out) - rho) < 1e-6


def test_snr_normalize_default_rho():
    ref, pert = noise(16000, 1), noise(16000, 2)
    assert abs(dsp.snr_db(ref, dsp.snr_normalize(pert, ref, 16)) - 16) < 1e-6


def test_snr_normalize_degenerate_and_mismatch():
    with pytest.raises(DegenerateInputError):
        dsp.snr_normalize(noise(10), AudioBuffer(np.zeros(10), RATE), 16)
    with pytest.raises(InvalidInputError):
        dsp.snr_normalize(noise(10), noise(11), 16)


# -------------------------------------------------------------- test tones


def test_sweep_peak_and_start_frequency():
    s = dsp.sweep_tone(50, 4000, 2.0, RATE)
    assert abs(np.max(np.abs(s.samples)) - 1.0) < 1e-9
    # instantaneous frequency from the first zero-crossing spacing
    x = dsp.sweep_tone(500, 4000, 2.0, RATE).samples
    zc = np.flatnonzero(np.diff(np.signbit(x)))
    f0 = RATE / (2 * np.mean(np.diff(zc[:3])))
    assert abs(f0 - 500) / 500 < 0.01


def test_narrow_sweep_is_a_tone():
    s = dsp.sweep_tone(1000, 1000.001, 0.5, RATE).samples
    t = np.arange(len(s)) / RATE
    ref = np.cos(2 * np.pi * 1000 * t)
    assert np.corrcoef(s, ref)[0, 1] > 0.999


# ------------------------------------------------------------------ mel


def test_mel_cepstra_gain_shift_only_moves_c0():
    x = noise(8000, 4)
    c1 = dsp.mel_cepstra(x, include_c0=True)
    c2 = dsp.mel_cepstra(x.with_samples(2 * x.samples), include_c0=True)
    assert np.max(np.abs(c1[:, 1:] - c2[:, 1:])) < 1e-6
    # oracle: log 2 spread over 40 bands by an orthonormal DCT lands as sqrt(40) * ln 2 in c0
    assert np.allclose(c2[:, 0] - c1[:, 0], math.sqrt(40) * math.log(2), atol=1e-9)


def test_mel_cepstra_matches_brute_force_dct():
    x = noise(4096, 8)
    lm = dsp.log_mel(x)
    n = lm.shape[1]
    k = np.arange(n)
    basis = np.cos(np.pi * (k[:, None] + 0.5) * k[None, :] / n) * np.sqrt(2 / n)
    basis[:, 0] /= np.sqrt(2)
    brute = lm @ basis
    assert np.allclose(dsp.mel_cepstra(x, 24), brute[:, 1:25], atol=1e-10)


def test_mel_cepstra_silence_is_finite_and_order_checked():
    c = dsp.mel_cepstra(AudioBuffer(np.zeros(4096), RATE))
    assert np.all(np.isfinite(c))
    with pytest.raises(InvalidInputError):
        dsp.mel_cepstra(noise(4096), order=0)
    with pytest.raises(InvalidInputError):
        dsp.mel_cepstra(noise(4096), order=40)


# -------------------------------------------------------------------- I/O


def test_wav_roundtrip(tmp_path):
    x = noise(1000)
    dsp.write_wav(tmp_path / "f.wav", x, "FLOAT")
    y = dsp.read_wav(tmp_path / "f.wav")
    assert y.sample_rate == RATE and np.allclose(y.samples, x.samples, atol=1e-7)
    dsp.write_wav(tmp_path / "p.wav", x, "PCM16")
    z = dsp.read_wav(tmp_path / "p.wav")
    assert np.max(np.abs(z.samples - x.samples)) <= 1 / 32768 + 1e-12


def test_spectrogram_csv(tmp_path):
    spec = dsp.stft(noise(2048), 256, 64)
    dsp.write_spectrogram_csv(tmp_path / "s.csv", spec)
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == spec.magnitudes.shape[0] + 1


def test_operations_are_pure():
    x = noise(4096, 9)
    assert np.array_equal(dsp.stft(x).magnitudes, dsp.stft(x).magnitudes)
    assert np.array_equal(dsp.resample(x, 8000).samples, dsp.resample(x, 8000).samples)
