import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasr.errors import InvalidInputError
from dasr.signal import (
    MaskSet,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    istft,
    padded_stft,
    read_wav,
    si_snr,
    stft,
    trimmed_istft,
    write_wav,
)

CFG = StftConfig()


def interior(cfg, length):
    pad = cfg.window_length - cfg.hop_length
    return slice(pad, length - pad)


def test_default_config():
    assert (CFG.window_length, CFG.hop_length, CFG.window) == (512, 256, "sqrt_hann")
    assert CFG.frequency_bins == 257


@pytest.mark.parametrize("window,hop", [("sqrt_hann", 256), ("sqrt_hann", 128), ("hann", 128)])
def test_supported_configs_reconstruct(window, hop):
    cfg = StftConfig(512, hop, window)
    x = np.random.default_rng(1).standard_normal(8000)
    y = istft(stft(Waveform(x), cfg)).samples[0]
    sl = interior(cfg, len(y))
    assert np.max(np.abs(y[sl] - x[:len(y)][sl])) < 1e-10


@pytest.mark.parametrize("kwargs", [
    {"window_length": 512, "hop_length": 200},
    {"window_length": 512, "hop_length": 512},
    {"window": "hann", "hop_length": 256},
    {"window": "blackman"},
])
def test_rejects_non_reconstructing_configs(kwargs):
    with pytest.raises(InvalidInputError):
        StftConfig(**kwargs)


def test_frame_count_and_shape():
    w = Waveform(np.zeros((2, 5000)))
    s = stft(w)
    assert s.bins.shape == (2, (5000 - 512) // 256 + 1, 257)


def test_too_short_signal():
    with pytest.raises(InvalidInputError):
        stft(Waveform(np.zeros(511)))


def test_zero_in_zero_out():
    s = stft(Waveform(np.zeros(4096)))
    assert not np.any(s.bins)
    assert not np.any(istft(s).samples)


def test_sinusoid_energy_at_bin():
    k, n = 20, np.arange(4096)
    x = np.cos(2 * np.pi * k * n / 512)
    power = np.abs(stft(Waveform(x)).bins[0]) ** 2
    frac_bin = power[:, k].sum() / power.sum()
    frac_lobe = power[:, k - 1:k + 2].sum() / power.sum()
    # exact-bin share of a windowed complex tone: (sum w)^2 / (N sum w^2);
    # the mirror component of a real cosine leaks a little on top
    w = CFG.analysis_window
    expected = w.sum() ** 2 / (512 * np.sum(w ** 2))
    assert frac_bin == pytest.approx(expected, rel=1e-3)
    assert frac_lobe > 0.99


def test_single_frame_pulse():
    pulse = np.zeros(512)
    pulse[100:140] = np.hanning(40)
    s = Spectrogram(np.fft.rfft(pulse * CFG.analysis_window)[None, None, :], CFG)
    out = istft(s).samples[0]
    expected = pulse * CFG.analysis_window * CFG.synthesis_window
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_output_length():
    s = stft(Waveform(np.zeros(3000)))
    assert istft(s).num_samples == (s.frames - 1) * 256 + 512


def test_white_noise_round_trip_relative_error():
    x = np.random.default_rng(0).standard_normal(16000)
    y = istft(stft(Waveform(x))).samples[0]
    sl = interior(CFG, len(y))
    err = np.linalg.norm(y[sl] - x[sl]) / np.linalg.norm(x[sl])
    assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(512, 6000), st.integers(0, 2 ** 31 - 1))
def test_padded_round_trip_recovers_every_sample(length, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (2, length))
    y = trimmed_istft(padded_stft(Waveform(x)), length).samples
    assert np.max(np.abs(y - x)) < 1e-6


def test_linearity():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 6000))
    a, b = 0.7, -2.3
    lhs = stft(Waveform(a * x + b * y)).bins
    rhs = a * stft(Waveform(x)).bins + b * stft(Waveform(y)).bins
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_parseval_consistency():
    rng = np.random.default_rng(4)
    x = np.zeros(8192)
    x[1024:7168] = rng.standard_normal(6144)  # zero edges: every sample interior
    bins = stft(Waveform(x)).bins[0]
    weights = np.full(257, 2.0)
    weights[[0, -1]] = 1.0
    spectral = np.sum(weights * np.abs(bins) ** 2)
    # sum_t w_a^2 == 1 for the default window, so the scale is the DFT size
    assert spectral == pytest.approx(512 * np.sum(x ** 2), rel=1e-6)


def test_apply_mask_identities():
    s = stft(Waveform(np.random.default_rng(5).standard_normal((2, 4000))))
    ones = np.ones(s.bins.shape[1:])
    np.testing.assert_array_equal(apply_mask(s, ones).bins, s.bins)
    assert not np.any(apply_mask(s, 0 * ones).bins)


def test_apply_mask_half_bins_energy():
    s = stft(Waveform(np.random.default_rng(6).standard_normal(4000)))
    mask = np.zeros(s.bins.shape[1:])
    mask[:, ::2] = 1
    out = apply_mask(s, mask)
    assert np.sum(np.abs(out.bins) ** 2) == pytest.approx(np.sum(np.abs(s.bins[:, :, ::2]) ** 2))


def test_binary_mask_idempotent():
    rng = np.random.default_rng(7)
    s = stft(Waveform(rng.standard_normal(4000)))
    mask = (rng.random(s.bins.shape[1:]) > 0.5).astype(float)
    once = apply_mask(s, mask)
    np.testing.assert_array_equal(apply_mask(once, mask).bins, once.bins)


def test_mask_shape_mismatch():
    s = stft(Waveform(np.zeros(4000)))
    with pytest.raises(InvalidInputError):
        apply_mask(s, np.ones((3, 3)))


def test_out_of_range_masks_are_clamped_with_warning():
    s = stft(Waveform(np.ones(4000)))
    with pytest.warns(RuntimeWarning):
        out = apply_mask(s, np.full(s.bins.shape[1:], 1.5))
    np.testing.assert_array_equal(out.bins, s.bins)
    with pytest.warns(RuntimeWarning):
        m = MaskSet(np.full((2, 3, 4), -0.1), np.zeros((3, 4)))
    assert m.speech_masks.min() == 0.0


def test_waveform_invariants():
    with pytest.raises(InvalidInputError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(InvalidInputError):
        Waveform(np.zeros(10), sample_rate=0)
    w = Waveform(np.zeros(10))
    with pytest.raises(ValueError):
        w.samples[0, 0] = 1.0


def test_si_snr_scale_invariant():
    rng = np.random.default_rng(8)
    t = rng.standard_normal(1000)
    n = 0.1 * rng.standard_normal(1000)
    assert si_snr(3 * (t + n), t) == pytest.approx(si_snr(t + n, t))


@pytest.mark.parametrize("subtype,tol", [("float32", 1e-7), ("int16", 1 / 32768)])
def test_wav_round_trip(tmp_path, subtype, tol):
    x = np.random.default_rng(9).uniform(-0.9, 0.9, (3, 1000))
    path = write_wav(tmp_path / "x.wav", Waveform(x), subtype)
    w = read_wav(path)
    assert w.channels == 3 and w.sample_rate == 16000
    assert np.max(np.abs(w.samples - x)) <= tol


def test_wav_rejects_other_rates(tmp_path):
    path = write_wav(tmp_path / "x.wav", Waveform(np.zeros(100), 8000))
    with pytest.raises(InvalidInputError):
        read_wav(path)
