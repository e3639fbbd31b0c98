"""Synthetic fixtures: array geometry, RIRs, speech-like sources, noise.

These stand in for recorded material in tests and demos. Sources are
harmonic "words" with known timings so that closed-loop experiments have
a ground-truth transcript.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dasr.signal import SAMPLE_RATE, Waveform, write_wav
from dasr.simulator import (
    Rir,
    SupervisionBundle,
    convolve_components,
    mix_meeting,
    split_rir,
)

SPEED_OF_SOUND = 343.0

VOCABULARY = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu budget meeting schedule review design launch timeline "
    "quarter report agenda action item follow update customer release"
).split()


def array_geometry(radius: float = 0.0425) -> np.ndarray:
    """Seven microphones: one central and six on a circle, shape (7, 3)."""
    angles = np.arange(6) * np.pi / 3
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(6)], axis=1)
    return np.vstack([np.zeros((1, 3)), ring])


def _fractional_impulse(taps, delay, half_width=16):
    out = np.zeros(taps)
    centre = int(np.floor(delay))
    n = np.arange(centre - half_width, centre + half_width + 1)
    keep = (n >= 0) & (n < taps)
    x = n - delay
    kernel = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * x / (half_width + 1)))
    out[n[keep]] = kernel[keep]
    return out


def synthetic_rir(rng: np.random.Generator, mics: np.ndarray, source: np.ndarray,
                  rt60: float = 0.3, length_s: float = 0.5, num_reflections: int = 12,
                  fs: int = SAMPLE_RATE, late_level_db: float = -12.0) -> Rir:
    """Direct path, a few plane-wave early reflections and a diffuse tail."""
    taps = int(length_s * fs)
    mics = np.asarray(mics, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    dist = np.linalg.norm(mics - source, axis=1)
    base = dist.min()
    h = np.zeros((len(mics), taps))
    lead = 40  # samples before the direct path
    for m in range(len(mics)):
        h[m] += _fractional_impulse(taps, lead + (dist[m] - base) / SPEED_OF_SOUND * fs)
    decay = 3 * np.log(10) / rt60
    for _ in range(num_reflections):
        delay_s = rng.uniform(0.002, 0.045)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        gain = rng.uniform(0.2, 0.6) * np.exp(-decay * delay_s) * rng.choice([-1, 1])
        for m in range(len(mics)):
            d = lead + (delay_s - mics[m] @ direction / SPEED_OF_SOUND) * fs
            h[m] += gain * _fractional_impulse(taps, d)
    t = np.arange(taps) / fs
    tail_start = lead + int(0.01 * fs)
    envelope = np.where(np.arange(taps) >= tail_start, np.exp(-decay * t), 0.0)
    tail = rng.standard_normal((len(mics), taps)) * envelope
    tail *= 10 ** (late_level_db / 20) * np.sqrt(fs / (np.sum(envelope ** 2) + 1e-12)) * 0.05
    h += tail
    return Rir(h / (np.abs(h[0]).max() * base))


def exponential_decay_rir(rt60: float, rng: np.random.Generator, length_s: float | None = None,
                          fs: int = SAMPLE_RATE) -> Rir:
    """Gaussian noise under an envelope decaying 60 dB in ``rt60`` seconds."""
    length_s = length_s or max(1.0, 2 * rt60)
    t = np.arange(int(length_s * fs)) / fs
    r = np.exp(-t * 3 * np.log(10) / rt60) * rng.standard_normal(t.size)
    return Rir(r)


@dataclass(frozen=True)
class Voice:
    """Pitch and spectral envelope of one synthetic talker."""

    f0: float
    formants: tuple[float, ...]
    bandwidth: float = 250.0

    @classmethod
    def random(cls, rng, f0_range=(90.0, 260.0)):
        f0 = rng.uniform(*f0_range)
        formants = tuple(np.sort(rng.uniform([300, 900, 2000], [900, 2000, 3500])))
        return cls(float(f0), formants, float(rng.uniform(150, 350)))

    def harmonic_gains(self, f0):
        freqs = f0 * np.arange(1, int(7000 // f0) + 1)
        env = sum(np.exp(-0.5 * ((freqs - f) / self.bandwidth) ** 2) for f in self.formants)
        # -6 dB per octave source tilt
        return freqs, (0.05 + env) * f0 / freqs


def synthetic_utterance(rng: np.random.Generator, voice: Voice, duration_s: float = 8.0,
                        fs: int = SAMPLE_RATE, word_s=(0.2, 0.5), gap_s=(0.05, 0.25),
                        pause_s=(0.4, 1.0), pause_prob=0.15):
    """Harmonic word bursts with pauses.

    Returns ``(waveform, words)`` with words as ``{text, start_s, end_s}``.
    """
    n = int(duration_s * fs)
    x = np.zeros(n)
    words = []
    t = rng.uniform(0.05, 0.3)
    while True:
        dur = rng.uniform(*word_s)
        if t + dur > duration_s - 0.05:
            break
        start, stop = int(t * fs), int((t + dur) * fs)
        tt = np.arange(stop - start) / fs
        f0 = voice.f0 * rng.uniform(0.9, 1.1)
        glide = 1 + rng.uniform(-0.15, 0.15) * tt / dur
        phase = 2 * np.pi * f0 * np.cumsum(glide) / fs
        freqs, gains = voice.harmonic_gains(f0)
        burst = sum(g * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
                    for k, g in enumerate(gains, start=1))
        # syllable-rate amplitude modulation, one to three nuclei per word
        syllables = rng.integers(1, 4)
        env = np.sin(np.pi * syllables * tt / dur) ** 2
        x[start:stop] += burst * env * rng.uniform(0.6, 1.0)
        words.append({"text": VOCABULARY[rng.integers(len(VOCABULARY))],
                      "start_s": start / fs, "end_s": stop / fs})
        t += dur + rng.uniform(*gap_s)
        if rng.random() < pause_prob:
            t += rng.uniform(*pause_s)
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.5 / peak
    return Waveform(x, fs), words


def diffuse_noise(rng: np.random.Generator, mics: np.ndarray, num_samples: int,
                  fs: int = SAMPLE_RATE, nfft: int = 512) -> Waveform:
    """Spherically isotropic noise with sinc spatial coherence."""
    mics = np.asarray(mics, dtype=np.float64)
    m = len(mics)
    hop = nfft // 2
    frames = num_samples // hop + 2
    freqs = np.fft.rfftfreq(nfft, 1 / fs)
    dist = np.linalg.norm(mics[:, None] - mics[None], axis=-1)
    spec = np.zeros((m, frames, len(freqs)), dtype=np.complex128)
    white = (rng.standard_normal((m, frames, len(freqs)))
             + 1j * rng.standard_normal((m, frames, len(freqs)))) / np.sqrt(2)
    for f, freq in enumerate(freqs):
        coherence = np.sinc(2 * freq * dist / SPEED_OF_SOUND)
        chol = np.linalg.cholesky(coherence + 1e-6 * np.eye(m))
        spec[:, :, f] = chol @ white[:, :, f]
    window = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(nfft) / nfft))
    frames_td = np.fft.irfft(spec, n=nfft, axis=-1) * window
    out = np.zeros((m, (frames - 1) * hop + nfft))
    for k in range(frames):
        out[:, k * hop:k * hop + nfft] += frames_td[:, k]
    out = out[:, nfft:nfft + num_samples]
    return Waveform(out / (np.std(out) + 1e-12) * 0.05, fs)


def synthetic_bundle(seed: int, num_speakers: int = 3, channels: int = 7,
                     utterance_s: float = 8.0, max_shift_s: float = 2.0,
                     rt60_range=(0.2, 0.4), snr_db: float | None = 20.0,
                     with_noise: bool = True, level_db: float = 3.0) -> SupervisionBundle:
    """A simulated meeting built through the regular simulator operations."""
    rng = np.random.default_rng(seed)
    mics = array_geometry()[:channels] if channels > 1 else np.zeros((1, 3))
    rt60 = rng.uniform(*rt60_range)
    pairs, transcripts = [], []
    angles = rng.choice(12, size=num_speakers, replace=False) * (2 * np.pi / 12)
    f0_bands = np.linspace(90.0, 280.0, num_speakers + 1)
    for i in range(num_speakers):
        voice = Voice.random(rng, (f0_bands[i], f0_bands[i + 1]))
        speech, words = synthetic_utterance(rng, voice, utterance_s)
        dist = rng.uniform(0.8, 2.0)
        source = np.array([dist * np.cos(angles[i]), dist * np.sin(angles[i]),
                           rng.uniform(0.1, 0.4)])
        rir = synthetic_rir(rng, mics, source, rt60=rt60)
        split = split_rir(rir)
        de, rv = convolve_components(speech, split)
        # talker level at the array: unit direct+early RMS on mic 0, +-level_db jitter
        gain = 10 ** (rng.uniform(-level_db, level_db) / 20) * 0.1 / (
            np.sqrt(np.mean(de.samples[0] ** 2)) + 1e-12)
        pairs.append((Waveform(de.samples * gain), Waveform(rv.samples * gain)))
        transcripts.append(words)
    noise = None
    if with_noise:
        length = int((utterance_s + max_shift_s + 1) * SAMPLE_RATE)
        noise = diffuse_noise(rng, mics, length)
    shifts = rng.uniform(0, max_shift_s, size=num_speakers)
    bundle = mix_meeting(pairs, noise, shifts=shifts, rng_seed=int(rng.integers(2 ** 32)),
                         snr_db=snr_db, transcripts=transcripts)
    bundle.seed = seed
    bundle.sources = {"synthetic": True, "rt60": float(rt60)}
    return bundle


def write_fixture_corpus(out_dir, seed: int = 0, num_speakers: int = 12,
                         utterances_per_speaker: int = 1, rooms: int = 2,
                         positions: int = 4, channels: int = 7,
                         utterance_s: float = 3.0) -> Path:
    """Write synthetic utterances, RIRs and noise plus a simulation manifest.

    Returns the manifest path. Used by the tests and for trying out
    ``dasr simulate`` without a real corpus.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    mics = array_geometry()[:channels] if channels > 1 else np.zeros((1, 3))
    lines = []
    for s in range(num_speakers):
        voice = Voice.random(rng)
        for u in range(utterances_per_speaker):
            speech, _ = synthetic_utterance(rng, voice, utterance_s, pause_prob=0.4)
            name = f"utt_s{s}_{u}.wav"
            write_wav(out_dir / name, speech)
            lines.append({"type": "utterance", "path": name, "speaker_id": f"s{s}",
                          "mos": round(float(rng.uniform(2.5, 4.8)), 3),
                          "duration": speech.duration})
    for r in range(rooms):
        rt60 = rng.uniform(0.2, 0.6)
        for p in range(positions):
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.8, 2.5)
            source = np.array([dist * np.cos(angle), dist * np.sin(angle), 0.3])
            rir = synthetic_rir(rng, mics, source, rt60=rt60)
            name = f"rir_r{r}_p{p}.wav"
            write_wav(out_dir / name, Waveform(rir.response))
            lines.append({"type": "rir", "path": name, "room_id": f"r{r}",
                          "position_id": f"p{p}"})
        name = f"noise_r{r}.wav"
        write_wav(out_dir / name, diffuse_noise(rng, mics, 2 * SAMPLE_RATE))
        lines.append({"type": "noise", "path": name, "room_id": f"r{r}"})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(line) + "\n" for line in lines))
    return manifest


def write_closed_loop_meeting(bundle: SupervisionBundle, out_dir, meeting_id: str,
                              cfg=None) -> tuple[dict, dict]:
    """Write one simulated meeting with everything needed to run it end to end.

    Writes the device audio (channel 0 for ``sc``, all channels for ``mc``),
    the bundle used by the oracle estimator and a reference transcript.
    Returns ``(manifest_record, asr_script)``: the script maps the content
    hash of every separated stream to the words of the speaker it carries,
    so a scripted ASR reproduces the reference exactly.
    """
    from dasr.css import css_pipeline
    from dasr.pipeline import (
        MeetingManifest,
        PipelineConfig,
        bundle_reference,
        fingerprint,
        load_audio,
        oracle_estimator_factory,
    )
    from dasr.scoring import write_transcripts
    from dasr.simulator import write_bundle

    cfg = cfg or PipelineConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    audio = bundle.mixture.channel(0) if cfg.track == "sc" else bundle.mixture
    write_wav(out_dir / f"{meeting_id}.wav", audio)
    write_bundle(bundle, out_dir / f"{meeting_id}_bundle")
    write_transcripts(out_dir / f"{meeting_id}_ref.jsonl",
                      [bundle_reference(bundle, meeting_id)])
    record = {
        "meeting_id": meeting_id,
        "devices": [{"device_id": f"{meeting_id}-{cfg.track}", "track": cfg.track,
                     "channels": audio.channels, "wav": f"{meeting_id}.wav"}],
        "reference": f"{meeting_id}_ref.jsonl",
        "oracle_bundle": f"{meeting_id}_bundle",
    }
    # separate exactly as the pipeline will, then key each stream's words
    manifest = MeetingManifest.from_dict(record, out_dir)
    estimator = oracle_estimator_factory(manifest, cfg)
    streams = css_pipeline(load_audio(manifest, cfg.track), estimator, cfg.css).streams
    channel = cfg.css.ref_channel if cfg.track == "mc" else 0
    script = {}
    for stream in streams:
        x = stream.samples[0]
        score = [abs(np.dot(x, de.samples[channel])) / (np.linalg.norm(de.samples[channel]) + 1e-12)
                 for de in bundle.direct_early]
        script[fingerprint(stream)] = bundle.transcripts[int(np.argmax(score))]
    return record, script
