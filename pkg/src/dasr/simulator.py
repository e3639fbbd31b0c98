"""Simulated training mixtures with a full supervision decomposition.

Measured room impulse responses are split into a direct+early part and a
late-reverberation part; clean utterances get extra silence at detected
pauses, are convolved with both parts, shifted, summed over speakers and
mixed with recorded noise. Every component is kept so that

    mixture = sum_i (direct_early_i + reverb_i) + noise

holds sample by sample.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from dasr.errors import InsufficientDecayError, InvalidInputError
from dasr.signal import SAMPLE_RATE, Waveform, read_wav, write_wav

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Rir:
    response: np.ndarray
    room_id: str = ""
    position_id: str = ""
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        response = np.asarray(self.response, dtype=np.float64)
        if response.ndim == 1:
            response = response[None, :]
        if response.ndim != 2 or response.shape[1] < 1:
            raise InvalidInputError(f"RIR must be (channels, taps), got {response.shape}")
        if not np.all(np.isfinite(response)):
            raise InvalidInputError("RIR contains non-finite taps")
        response.setflags(write=False)
        object.__setattr__(self, "response", response)

    @property
    def channels(self) -> int:
        return self.response.shape[0]

    @property
    def taps(self) -> int:
        return self.response.shape[1]


@dataclass(frozen=True, eq=False)
class RirSplit:
    direct_early: np.ndarray
    late: np.ndarray
    cutoff_ms: float
    transition_ms: float
    onset: int
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class UtteranceRecord:
    path: str
    speaker_id: str
    mos_score: float
    duration: float

    def __post_init__(self):
        if not np.isfinite(self.mos_score):
            raise InvalidInputError(f"{self.path}: MOS score must be finite")
        if self.duration <= 0:
            raise InvalidInputError(f"{self.path}: duration must be positive")


@dataclass(eq=False)
class SupervisionBundle:
    """A mixture and the components it was summed from.

    All waveforms share length and channel count. ``transcripts`` optionally
    holds, per speaker, word dicts ``{text, start_s, end_s}`` on the mixture
    time axis.
    """

    mixture: Waveform
    direct_early: list[Waveform]
    reverb: list[Waveform]
    noise: Waveform
    speaker_offsets: list[float]
    snr_db: float | None = None
    seed: int | None = None
    sources: dict = field(default_factory=dict)
    transcripts: list[list[dict]] = field(default_factory=list)

    @property
    def num_speakers(self) -> int:
        return len(self.direct_early)

    def identity_error(self) -> float:
        """Max absolute deviation from the mixture decomposition."""
        total = self.noise.samples.copy()
        for de, rv in zip(self.direct_early, self.reverb):
            total = total + de.samples + rv.samples
        return float(np.max(np.abs(self.mixture.samples - total), initial=0.0))

    def metadata(self) -> dict:
        return {
            "num_speakers": self.num_speakers,
            "speaker_offsets": list(self.speaker_offsets),
            "snr_db": self.snr_db,
            "seed": self.seed,
            "sample_rate": self.mixture.sample_rate,
            "num_samples": self.mixture.num_samples,
            "channels": self.mixture.channels,
            "sources": self.sources,
            "transcripts": self.transcripts,
        }


def split_rir(r: Rir, cutoff_ms: float = 50.0, transition_ms: float = 8.0) -> RirSplit:
    """Split at ``cutoff_ms`` after the channel-0 peak with a raised-cosine fade.

    The fade is centred on the cutoff and ``transition_ms`` wide; the two
    windows sum to one at every tap.
    """
    if transition_ms < 0 or transition_ms > 2 * cutoff_ms:
        raise InvalidInputError(
            f"transition {transition_ms} ms must lie in [0, 2 * cutoff] = [0, {2 * cutoff_ms}]")
    ch0 = np.abs(r.response[0])
    if not ch0.any():
        raise InvalidInputError("RIR channel 0 is all zeros, no onset to measure from")
    onset = int(np.argmax(ch0))
    t_ms = (np.arange(r.taps) - onset) * 1000.0 / r.sample_rate
    fade_start = cutoff_ms - transition_ms / 2
    if transition_ms > 0:
        phase = np.clip((t_ms - fade_start) / transition_ms, 0.0, 1.0)
        window = 0.5 * (1.0 + np.cos(np.pi * phase))
    else:
        window = np.where(t_ms < cutoff_ms, 1.0, np.where(t_ms > cutoff_ms, 0.0, 0.5))
    direct_early = r.response * window
    late = r.response * (1.0 - window)
    return RirSplit(direct_early, late, cutoff_ms, transition_ms, onset, r.sample_rate)


def _frame_power(x, frame, hop):
    if len(x) < frame:
        return np.zeros(0)
    n = (len(x) - frame) // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(frame)[None, :]
    return np.mean(x[idx] ** 2, axis=1)


def detect_pauses(speech: Waveform, frame_ms: float = 25.0, threshold_db: float = -30.0,
                  min_pause_ms: float = 150.0, hop_ms: float = 10.0) -> list[float]:
    """Midpoints (seconds) of power drops inside a mono utterance.

    A pause is a run of frames below ``threshold_db`` relative to the loudest
    frame lasting at least ``min_pause_ms``. Quiet runs touching either end
    of the signal are leading/trailing silence, not pauses.
    """
    if speech.channels != 1:
        raise InvalidInputError("pause detection needs a mono waveform")
    fs = speech.sample_rate
    frame = int(round(frame_ms * fs / 1000))
    hop = int(round(hop_ms * fs / 1000))
    power = _frame_power(speech.samples[0], frame, hop)
    if power.size == 0 or power.max() <= 0:
        return []
    quiet = power < power.max() * 10 ** (threshold_db / 10)
    pauses = []
    # run boundaries of the quiet mask
    edges = np.diff(np.concatenate(([0], quiet.astype(np.int8), [0])))
    for first, stop in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
        last = stop - 1
        if first == 0 or last == len(quiet) - 1:
            continue
        start_s = first * hop / fs
        end_s = (last * hop + frame) / fs
        if (end_s - start_s) * 1000 >= min_pause_ms:
            pauses.append(0.5 * (start_s + end_s))
    return pauses


def insert_silences(speech: Waveform, pause_points: Sequence[float], rng_seed=0,
                    min_gap_s: float = 0.2, max_gap_s: float = 2.0,
                    probability: float = 0.5) -> Waveform:
    """Insert zero runs of uniform random length at some pause points."""
    return _insert_silences(speech, pause_points, rng_seed, min_gap_s, max_gap_s,
                            probability)[0]


def _insert_silences(speech, pause_points, rng_seed, min_gap_s, max_gap_s, probability):
    if not 0.0 <= probability <= 1.0:
        raise InvalidInputError("probability must lie in [0, 1]")
    if min_gap_s < 0 or max_gap_s < min_gap_s:
        raise InvalidInputError("need 0 <= min_gap_s <= max_gap_s")
    rng = np.random.default_rng(rng_seed)
    fs = speech.sample_rate
    cuts, gaps = [], []
    for point in sorted(pause_points):
        if not 0 <= point <= speech.duration:
            raise InvalidInputError(f"pause point {point} s outside the signal")
        # always draw both numbers so one decision does not shift the others
        take = rng.random() < probability
        gap = rng.uniform(min_gap_s, max_gap_s)
        if take:
            cuts.append(int(round(point * fs)))
            gaps.append(int(round(gap * fs)))
    if not cuts:
        return speech, []
    pieces, prev = [], 0
    for cut, gap in zip(cuts, gaps):
        pieces.append(speech.samples[:, prev:cut])
        pieces.append(np.zeros((speech.channels, gap)))
        prev = cut
    pieces.append(speech.samples[:, prev:])
    inserted = [(cut / fs, gap / fs) for cut, gap in zip(cuts, gaps)]
    return Waveform(np.concatenate(pieces, axis=1), fs), inserted


def shift_times(times, insertions):
    """Map original-signal times through a list of ``(at_s, gap_s)`` insertions."""
    times = np.asarray(times, dtype=np.float64)
    out = times.copy()
    for at, gap in insertions:
        out = out + np.where(times >= at, gap, 0.0)
    return out


def mos_quartile_filter(records: Sequence[UtteranceRecord]) -> list[UtteranceRecord]:
    """Records at or above the 75th percentile MOS, input order kept."""
    if not records:
        raise InvalidInputError("cannot filter an empty record list")
    threshold = np.percentile([r.mos_score for r in records], 75)
    return [r for r in records if r.mos_score >= threshold]


def convolve_components(speech: Waveform, split: RirSplit) -> tuple[Waveform, Waveform]:
    """Convolve mono speech with both RIR parts, full linear length."""
    if speech.channels != 1:
        raise InvalidInputError("speech must be mono")
    x = speech.samples[0]
    de = np.stack([fftconvolve(x, h) for h in split.direct_early])
    rv = np.stack([fftconvolve(x, h) for h in split.late])
    return Waveform(de, speech.sample_rate), Waveform(rv, speech.sample_rate)


def _fit_noise(noise, channels, length):
    samples = noise.samples
    if samples.shape[0] == 1 and channels > 1:
        samples = np.repeat(samples, channels, axis=0)
    if samples.shape[0] != channels:
        raise InvalidInputError(
            f"noise has {samples.shape[0]} channels, speech has {channels}")
    if length == 0:
        return np.zeros((channels, 0))
    if samples.shape[1] == 0:
        return np.zeros((channels, length))
    reps = -(-length // samples.shape[1])
    return np.tile(samples, (1, reps))[:, :length]


def mix_meeting(speakers: Sequence[tuple[Waveform, Waveform]], noise: Waveform | None = None,
                shifts: Sequence[float] | None = None, rng_seed=0,
                snr_db: float | None = None, max_shift_s: float = 10.0,
                snr_range: tuple[float, float] = (5.0, 25.0),
                transcripts: Sequence[Sequence[dict]] | None = None,
                scale_noise: bool = True) -> SupervisionBundle:
    """Shift and sum convolved speaker pairs and add noise.

    ``speakers`` holds ``(direct_early, reverb)`` per speaker. Missing shifts
    are drawn uniform in ``[0, max_shift_s]``; a missing ``snr_db`` is drawn
    uniform in ``snr_range``. Noise is tiled or truncated to the mixture
    length and scaled to the SNR against the summed speech, unless either
    side has no energy or ``scale_noise`` is false.
    """
    if len(speakers) < 1:
        raise InvalidInputError("need at least one speaker")
    rng = np.random.default_rng(rng_seed)
    fs = speakers[0][0].sample_rate
    channels = speakers[0][0].channels
    for de, rv in speakers:
        if de.sample_rate != fs or rv.sample_rate != fs:
            raise InvalidInputError("all components must share one sample rate")
        if de.channels != channels or rv.channels != channels:
            raise InvalidInputError("all components must share one channel count")
        if de.num_samples != rv.num_samples:
            raise InvalidInputError("direct+early and reverb lengths differ")
    if shifts is None:
        shifts = rng.uniform(0.0, max_shift_s, size=len(speakers))
    if len(shifts) != len(speakers):
        raise InvalidInputError("one shift per speaker is required")
    if snr_db is None:
        snr_db = float(rng.uniform(*snr_range))
    offsets = [int(round(s * fs)) for s in shifts]
    if min(offsets) < 0:
        raise InvalidInputError("shifts must be nonnegative")
    length = max(o + de.num_samples for o, (de, _) in zip(offsets, speakers))

    des, rvs = [], []
    speech = np.zeros((channels, length))
    for o, (de, rv) in zip(offsets, speakers):
        a = np.zeros((channels, length))
        b = np.zeros((channels, length))
        a[:, o:o + de.num_samples] = de.samples
        b[:, o:o + rv.num_samples] = rv.samples
        des.append(a)
        rvs.append(b)
        speech += a + b

    applied_snr = None
    if noise is None:
        noise_samples = np.zeros((channels, length))
    else:
        if noise.sample_rate != fs:
            raise InvalidInputError("noise sample rate differs from speech")
        noise_samples = _fit_noise(noise, channels, length)
        p_speech = np.mean(speech ** 2) if length else 0.0
        p_noise = np.mean(noise_samples ** 2) if length else 0.0
        if scale_noise and p_speech > 0 and p_noise > 0:
            noise_samples = noise_samples * np.sqrt(p_speech / (p_noise * 10 ** (snr_db / 10)))
            applied_snr = snr_db

    mixture = noise_samples.copy()
    for a, b in zip(des, rvs):
        mixture += a + b

    words = []
    if transcripts is not None:
        for o, spk_words in zip(offsets, transcripts):
            words.append([{"text": w["text"], "start_s": w["start_s"] + o / fs,
                           "end_s": w["end_s"] + o / fs} for w in spk_words])
    return SupervisionBundle(
        mixture=Waveform(mixture, fs),
        direct_early=[Waveform(a, fs) for a in des],
        reverb=[Waveform(b, fs) for b in rvs],
        noise=Waveform(noise_samples, fs),
        speaker_offsets=[o / fs for o in offsets],
        snr_db=applied_snr,
        transcripts=words,
    )


def energy_decay_curve(response) -> np.ndarray:
    """Schroeder backward integral in dB, normalized to 0 dB at the start."""
    energy = np.asarray(response, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(edc / edc[0])


def estimate_rt60(r: Rir, upper_db: float = -5.0, lower_db: float = -35.0) -> float:
    """RT60 extrapolated from a line fit to the -5..-35 dB decay (T30)."""
    response = r.response[0]
    if not np.any(response):
        raise InvalidInputError("RIR channel 0 is all zeros")
    edc = energy_decay_curve(response)
    in_range = np.flatnonzero((edc <= upper_db) & (edc >= lower_db))
    if edc.min() > lower_db or in_range.size < 2:
        raise InsufficientDecayError(
            f"decay curve does not cover {upper_db}..{lower_db} dB")
    t = in_range / r.sample_rate
    slope, _ = np.polyfit(t, edc[in_range], 1)
    if slope >= 0:
        raise InsufficientDecayError("decay curve is not decreasing over the fit range")
    return float(-60.0 / slope)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class RirRecord:
    path: str
    room_id: str
    position_id: str


@dataclass(frozen=True)
class NoiseRecord:
    path: str
    room_id: str = ""


@dataclass
class SimulationManifest:
    utterances: list[UtteranceRecord]
    rirs: list[RirRecord]
    noises: list[NoiseRecord]
    root: Path = Path(".")

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path


def load_manifest(path) -> SimulationManifest:
    """Read a JSON-lines manifest of utterances, RIRs and noises.

    Each line has a ``type`` of ``utterance`` (path, speaker_id, mos, duration),
    ``rir`` (path, room_id, position_id) or ``noise`` (path, room_id).
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    utterances, rirs, noises = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("type")
        if kind == "utterance":
            utterances.append(UtteranceRecord(rec["path"], str(rec["speaker_id"]),
                                              float(rec["mos"]), float(rec["duration"])))
        elif kind == "rir":
            rirs.append(RirRecord(rec["path"], str(rec["room_id"]), str(rec["position_id"])))
        elif kind == "noise":
            noises.append(NoiseRecord(rec["path"], str(rec.get("room_id", ""))))
        else:
            raise InvalidInputError(f"{path}:{lineno}: unknown record type {kind!r}")
    return SimulationManifest(utterances, rirs, noises, path.parent)


@dataclass(frozen=True)
class SimulationParams:
    num_speakers: int = 3
    cutoff_ms: float = 50.0
    transition_ms: float = 8.0
    pause_frame_ms: float = 25.0
    pause_threshold_db: float = -30.0
    min_pause_ms: float = 150.0
    insert_probability: float = 0.5
    min_gap_s: float = 0.2
    max_gap_s: float = 2.0
    max_shift_s: float = 10.0
    snr_range: tuple[float, float] = (5.0, 25.0)


def job_rng(global_seed: int, index: int) -> np.random.Generator:
    """Random stream owned by one mixture, independent of scheduling order."""
    return np.random.default_rng([global_seed, index])


def generate_bundle(manifest: SimulationManifest, global_seed: int, index: int,
                    params: SimulationParams = SimulationParams(),
                    filtered: list[UtteranceRecord] | None = None) -> SupervisionBundle:
    """Build mixture ``index`` of a run seeded with ``global_seed``."""
    rng = job_rng(global_seed, index)
    pool = filtered if filtered is not None else mos_quartile_filter(manifest.utterances)

    by_room: dict[str, dict[str, RirRecord]] = {}
    for rec in manifest.rirs:
        by_room.setdefault(rec.room_id, {}).setdefault(rec.position_id, rec)
    rooms = sorted(room for room, pos in by_room.items() if len(pos) >= params.num_speakers)
    if not rooms:
        raise InvalidInputError(
            f"no room has {params.num_speakers} distinct RIR positions")
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for rec in pool:
        by_speaker.setdefault(rec.speaker_id, []).append(rec)
    speakers = sorted(by_speaker)
    if len(speakers) < params.num_speakers:
        raise InvalidInputError(
            f"only {len(speakers)} speakers survive MOS filtering, need {params.num_speakers}")

    room = rooms[rng.integers(len(rooms))]
    positions = sorted(by_room[room])
    chosen_pos = rng.choice(len(positions), size=params.num_speakers, replace=False)
    chosen_spk = rng.choice(len(speakers), size=params.num_speakers, replace=False)

    pairs, sources = [], {"room_id": room, "speakers": []}
    for pos_idx, spk_idx in zip(chosen_pos, chosen_spk):
        utts = by_speaker[speakers[spk_idx]]
        utt = utts[rng.integers(len(utts))]
        rir_rec = by_room[room][positions[pos_idx]]
        speech = read_wav(manifest.resolve(utt.path)).channel(0)
        pauses = detect_pauses(speech, params.pause_frame_ms, params.pause_threshold_db,
                               params.min_pause_ms)
        augmented = insert_silences(speech, pauses, int(rng.integers(2 ** 32)),
                                    params.min_gap_s, params.max_gap_s,
                                    params.insert_probability)
        rir_wave = read_wav(manifest.resolve(rir_rec.path))
        split = split_rir(Rir(rir_wave.samples, rir_rec.room_id, rir_rec.position_id),
                          params.cutoff_ms, params.transition_ms)
        pairs.append(convolve_components(augmented, split))
        sources["speakers"].append({"utterance": utt.path, "speaker_id": utt.speaker_id,
                                    "rir": rir_rec.path, "position_id": rir_rec.position_id,
                                    "pauses": len(pauses)})

    noise = None
    room_noises = [n for n in manifest.noises if n.room_id == room] or manifest.noises
    if room_noises:
        noise_rec = room_noises[rng.integers(len(room_noises))]
        noise = read_wav(manifest.resolve(noise_rec.path))
        sources["noise"] = noise_rec.path
    mix_seed = int(rng.integers(2 ** 32))
    bundle = mix_meeting(pairs, noise, rng_seed=mix_seed, max_shift_s=params.max_shift_s,
                         snr_range=params.snr_range)
    bundle.seed = global_seed
    sources["index"] = index
    bundle.sources = sources
    return bundle


def write_bundle(bundle: SupervisionBundle, out_dir) -> Path:
    """Write mixture, per-speaker components, noise and ``bundle.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_wav(out_dir / "mixture.wav", bundle.mixture)
    for i, (de, rv) in enumerate(zip(bundle.direct_early, bundle.reverb)):
        write_wav(out_dir / f"spk{i}_direct_early.wav", de)
        write_wav(out_dir / f"spk{i}_reverb.wav", rv)
    write_wav(out_dir / "noise.wav", bundle.noise)
    (out_dir / "bundle.json").write_text(json.dumps(bundle.metadata(), indent=2))
    return out_dir


def read_bundle(bundle_dir) -> SupervisionBundle:
    bundle_dir = Path(bundle_dir)
    meta = json.loads((bundle_dir / "bundle.json").read_text())
    n = meta["num_speakers"]
    return SupervisionBundle(
        mixture=read_wav(bundle_dir / "mixture.wav"),
        direct_early=[read_wav(bundle_dir / f"spk{i}_direct_early.wav") for i in range(n)],
        reverb=[read_wav(bundle_dir / f"spk{i}_reverb.wav") for i in range(n)],
        noise=read_wav(bundle_dir / "noise.wav"),
        speaker_offsets=meta["speaker_offsets"],
        snr_db=meta.get("snr_db"),
        seed=meta.get("seed"),
        sources=meta.get("sources", {}),
        transcripts=meta.get("transcripts", []),
    )


def simulate(manifest_path, out_dir, count: int, seed: int,
             params: SimulationParams = SimulationParams(), workers: int = 1) -> list[Path]:
    """Generate ``count`` bundles into ``out_dir/bundle_<index>``."""
    manifest = load_manifest(manifest_path)
    filtered = mos_quartile_filter(manifest.utterances)
    out_dir = Path(out_dir)

    def job(index):
        bundle = generate_bundle(manifest, seed, index, params, filtered)
        return write_bundle(bundle, out_dir / f"bundle_{index:06d}")

    if workers <= 1:
        return [job(i) for i in range(count)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(count)))
