import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasr.errors import InsufficientDecayError, InvalidInputError
from dasr.signal import Waveform
from dasr.simulator import (
    Rir,
    SimulationParams,
    UtteranceRecord,
    convolve_components,
    detect_pauses,
    energy_decay_curve,
    estimate_rt60,
    generate_bundle,
    insert_silences,
    load_manifest,
    mix_meeting,
    mos_quartile_filter,
    read_bundle,
    shift_times,
    simulate,
    split_rir,
    write_bundle,
)
from dasr.simulator import _insert_silences
from dasr.synthetic import exponential_decay_rir

FS = 16000


def tone(seconds, freq=440.0):
    t = np.arange(int(seconds * FS)) / FS
    return np.sin(2 * np.pi * freq * t)


# ------------------------------------------------------------------ RIR split

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(400, 4000))
def test_split_sums_to_original(seed, channels, taps):
    rng = np.random.default_rng(seed)
    r = Rir(rng.standard_normal((channels, taps)))
    s = split_rir(r)
    assert np.max(np.abs(s.direct_early + s.late - r.response)) <= 1e-12


def test_split_window_regions():
    h = np.zeros(3000)
    onset = 100
    h[onset] = 1.0
    h[onset + 1:] = 0.01
    s = split_rir(Rir(h))
    assert s.onset == onset
    ms = lambda k: onset + int(k * FS / 1000)  # noqa: E731
    # everything before cutoff - transition/2 is direct+early, after + transition/2 is late
    np.testing.assert_array_equal(s.late[0, :ms(46)], 0.0)
    np.testing.assert_array_equal(s.direct_early[0, ms(54):], 0.0)
    assert s.direct_early[0, onset] == 1.0


@pytest.mark.parametrize("transition", [8.0, 0.0])
def test_delta_at_cutoff_splits_half_half(transition):
    h = np.zeros(2000)
    h[10] = 1.0
    h[10 + 800] = 0.4  # 50 ms after the peak
    s = split_rir(Rir(h), transition_ms=transition)
    assert s.direct_early[0, 810] == pytest.approx(0.2, abs=1e-15)
    assert s.late[0, 810] == pytest.approx(0.2, abs=1e-15)


def test_split_onset_from_channel_zero():
    h = np.zeros((2, 2000))
    h[0, 50] = 1.0
    h[1, 20] = 5.0
    assert split_rir(Rir(h)).onset == 50


def test_split_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        split_rir(Rir(np.zeros(100)))
    with pytest.raises(InvalidInputError):
        split_rir(Rir(np.ones(100)), transition_ms=200)


# ------------------------------------------------------------------ pauses

def test_detects_single_internal_pause():
    x = np.concatenate([tone(0.5), np.zeros(int(0.3 * FS)), tone(0.5)])
    pauses = detect_pauses(Waveform(x))
    assert len(pauses) == 1
    assert pauses[0] == pytest.approx(0.65, abs=0.02)


def test_short_gaps_and_edges_are_not_pauses():
    x = np.concatenate([np.zeros(FS), tone(0.5), np.zeros(int(0.1 * FS)), tone(0.5),
                        np.zeros(FS)])
    assert detect_pauses(Waveform(x)) == []


def test_silence_has_no_pauses():
    assert detect_pauses(Waveform(np.zeros(FS))) == []
    with pytest.raises(InvalidInputError):
        detect_pauses(Waveform(np.zeros((2, FS))))


# ------------------------------------------------------------------ silences

def test_insert_silences_probability_extremes():
    x = Waveform(tone(1.0))
    assert insert_silences(x, [0.3, 0.6], probability=0.0) is x
    out, ins = _insert_silences(x, [0.3, 0.6], 5, 0.2, 2.0, 1.0)
    assert len(ins) == 2
    assert all(0.2 <= gap <= 2.0 for _, gap in ins)
    assert out.num_samples == x.num_samples + sum(int(round(g * FS)) for _, g in ins)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.lists(st.floats(0.05, 0.95), max_size=5))
def test_insert_silences_preserves_content(seed, points):
    x = Waveform(tone(1.0) + 2.0)  # no zeros in the input
    out, ins = _insert_silences(x, points, seed, 0.2, 2.0, 0.5)
    # dropping the inserted zeros gives back the original signal
    np.testing.assert_array_equal(out.samples[0][out.samples[0] != 0], x.samples[0])
    assert out.num_samples - x.num_samples == sum(int(round(g * FS)) for _, g in ins)


def test_insert_silences_deterministic():
    x = Waveform(tone(1.0))
    a = insert_silences(x, [0.2, 0.5, 0.8], rng_seed=9)
    b = insert_silences(x, [0.2, 0.5, 0.8], rng_seed=9)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_insert_silences_rejects_bad_points():
    with pytest.raises(InvalidInputError):
        insert_silences(Waveform(tone(1.0)), [2.0], probability=1.0)


def test_shift_times():
    out = shift_times([0.1, 0.5, 0.9], [(0.3, 1.0), (0.7, 0.5)])
    np.testing.assert_allclose(out, [0.1, 1.5, 2.4])


# ------------------------------------------------------------------ MOS filter

def test_mos_filter_keeps_top_quartile():
    recs = [UtteranceRecord(f"u{i}", "s", float(m), 1.0) for i, m in enumerate([4, 1, 3, 2])]
    # 75th percentile of 1..4 is 3.25
    assert [r.path for r in mos_quartile_filter(recs)] == ["u0"]


def test_mos_filter_ties_and_errors():
    recs = [UtteranceRecord(f"u{i}", "s", 3.0, 1.0) for i in range(5)]
    assert len(mos_quartile_filter(recs)) == 5
    with pytest.raises(InvalidInputError):
        mos_quartile_filter([])
    with pytest.raises(InvalidInputError):
        UtteranceRecord("u", "s", float("nan"), 1.0)


# ------------------------------------------------------------------ mixing

def small_speakers(rng, n=3, channels=2, length=4000):
    out = []
    for _ in range(n):
        out.append((Waveform(rng.standard_normal((channels, length))),
                    Waveform(0.3 * rng.standard_normal((channels, length)))))
    return out


def test_convolution_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = Waveform(rng.standard_normal(300))
    h = np.zeros((2, 1200))
    h[:, 5] = 1.0
    h[:, 1000] = 0.5
    split = split_rir(Rir(h))
    de, rv = convolve_components(x, split)
    assert de.num_samples == 300 + 1200 - 1
    for c in range(2):
        np.testing.assert_allclose(de.samples[c], np.convolve(x.samples[0], split.direct_early[c]),
                                   atol=1e-12)
        np.testing.assert_allclose(rv.samples[c], np.convolve(x.samples[0], split.late[c]),
                                   atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mixture_identity_and_snr(seed):
    rng = np.random.default_rng(seed)
    speakers = small_speakers(rng)
    noise = Waveform(rng.standard_normal((2, 1000)))
    b = mix_meeting(speakers, noise, rng_seed=seed, max_shift_s=0.5)
    assert b.identity_error() <= 1e-9
    speech = sum(d.samples + r.samples for d, r in zip(b.direct_early, b.reverb))
    measured = 10 * np.log10(np.mean(speech ** 2) / np.mean(b.noise.samples ** 2))
    assert measured == pytest.approx(b.snr_db, abs=1e-9)
    assert 5 <= b.snr_db <= 25
    assert all(0 <= o <= 0.5 for o in b.speaker_offsets)


def test_mix_places_components_at_shifts():
    rng = np.random.default_rng(1)
    speakers = small_speakers(rng, n=2, channels=1, length=1600)
    b = mix_meeting(speakers, shifts=[0.0, 0.5])
    assert b.mixture.num_samples == 8000 + 1600
    np.testing.assert_array_equal(b.direct_early[1].samples[0, 8000:], speakers[1][0].samples[0])
    assert not np.any(b.direct_early[1].samples[0, :8000])
    assert not np.any(b.noise.samples)
    assert b.snr_db is None


def test_mix_without_energy_skips_scaling():
    rng = np.random.default_rng(2)
    silent = [(Waveform.zeros(1, 100), Waveform.zeros(1, 100))]
    noise = Waveform(rng.standard_normal(30))
    b = mix_meeting(silent, noise, shifts=[0.0])
    # noise tiled to length, unscaled
    np.testing.assert_array_equal(b.noise.samples[0], np.tile(noise.samples[0], 4)[:100])
    assert b.snr_db is None


def test_mix_shifts_transcripts():
    rng = np.random.default_rng(3)
    speakers = small_speakers(rng, n=2, channels=1, length=1600)
    words = [[{"text": "a", "start_s": 0.0, "end_s": 0.05}],
             [{"text": "b", "start_s": 0.01, "end_s": 0.05}]]
    b = mix_meeting(speakers, shifts=[0.25, 1.0], transcripts=words)
    assert b.transcripts[0][0]["start_s"] == pytest.approx(0.25)
    assert b.transcripts[1][0]["end_s"] == pytest.approx(1.05)


def test_mix_rejects_inconsistent_input():
    rng = np.random.default_rng(4)
    a = small_speakers(rng, n=1, channels=2)[0]
    b = small_speakers(rng, n=1, channels=3)[0]
    with pytest.raises(InvalidInputError):
        mix_meeting([a, b])
    with pytest.raises(InvalidInputError):
        mix_meeting([a], shifts=[-1.0])
    with pytest.raises(InvalidInputError):
        mix_meeting([a], Waveform(np.ones((3, 10))))


# ------------------------------------------------------------------ RT60

@pytest.mark.parametrize("rt60", [0.2, 0.5, 1.0])
def test_rt60_exponential_decay(rt60):
    r = exponential_decay_rir(rt60, np.random.default_rng(0))
    assert estimate_rt60(r) == pytest.approx(rt60, rel=0.1)


def test_edc_of_pure_exponential_is_linear():
    fs, rt60 = 16000, 0.4
    t = np.arange(fs) / fs
    edc = energy_decay_curve(np.exp(-t * 3 * np.log(10) / rt60))
    assert edc[0] == 0.0
    k = int(0.1 * fs)
    assert edc[k] == pytest.approx(-60 * 0.1 / rt60, abs=0.05)


def test_rt60_needs_enough_decay():
    t = np.arange(2000) / FS
    with pytest.raises(InsufficientDecayError):
        estimate_rt60(Rir(np.exp(-t)))
    with pytest.raises(InvalidInputError):
        estimate_rt60(Rir(np.zeros(100)))


# ------------------------------------------------------------------ generation

def test_manifest_rejects_unknown_records(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"type": "video", "path": "x"}) + "\n")
    with pytest.raises(InvalidInputError):
        load_manifest(p)


def test_generated_bundle_invariants(corpus_manifest):
    man = load_manifest(corpus_manifest)
    b = generate_bundle(man, 7, 3)
    assert b.identity_error() <= 1e-9
    assert b.num_speakers == 3 and b.mixture.channels == 7
    spk = b.sources["speakers"]
    assert len({s["speaker_id"] for s in spk}) == 3
    assert len({s["position_id"] for s in spk}) == 3
    assert len({s["rir"].split("_p")[0] for s in spk}) == 1  # one room
    again = generate_bundle(man, 7, 3)
    np.testing.assert_array_equal(again.mixture.samples, b.mixture.samples)
    other = generate_bundle(man, 7, 4)
    assert other.mixture.num_samples != b.mixture.num_samples or not np.array_equal(
        other.mixture.samples, b.mixture.samples)


def test_generation_needs_enough_positions(corpus_manifest):
    man = load_manifest(corpus_manifest)
    with pytest.raises(InvalidInputError):
        generate_bundle(man, 0, 0, SimulationParams(num_speakers=5))


def test_bundle_round_trip(tmp_path, corpus_manifest):
    b = generate_bundle(load_manifest(corpus_manifest), 1, 0)
    back = read_bundle(write_bundle(b, tmp_path / "b"))
    assert back.speaker_offsets == b.speaker_offsets
    assert back.sources == b.sources
    np.testing.assert_allclose(back.mixture.samples, b.mixture.samples, atol=1e-6)
    assert back.identity_error() < 1e-6


def test_simulate_is_independent_of_worker_count(tmp_path, corpus_manifest):
    a = simulate(corpus_manifest, tmp_path / "a", 3, seed=5, workers=1)
    b = simulate(corpus_manifest, tmp_path / "b", 3, seed=5, workers=3)
    for pa, pb in zip(a, b):
        assert (pa / "mixture.wav").read_bytes() == (pb / "mixture.wav").read_bytes()
