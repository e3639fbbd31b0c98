"""End-to-end meeting processing: CSS, per-stream ASR, diarization, attribution."""

from __future__ import annotations

import dataclasses
import hashlib
import importlib
import io
import json
import logging
import os
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from dasr.css import MULTI_CHANNEL, SINGLE_CHANNEL, CssConfig, MaskEstimator, \
    OracleIrmEstimator, css_pipeline, write_streams
from dasr.diarization import (
    AttributedWord,
    DiarizationOutput,
    SpectralEmbedder,
    SpeakerEmbedder,
    attribute_words,
    diarize_streams,
)
from dasr.errors import AsrError, ConfigurationError, InvalidInputError
from dasr.scoring import (
    MeetingMetadata,
    ScoreReport,
    SegmentAnnotation,
    TimedWord,
    TranscriptSet,
    build_report,
    read_transcripts,
    write_transcripts,
)
from dasr.signal import StftConfig, Waveform, read_wav, write_wav
from dasr.simulator import SupervisionBundle, read_bundle

logger = logging.getLogger(__name__)

ASR_ENDPOINT_ENV = "DASR_ASR_ENDPOINT"
TRACK_CHANNELS = {"sc": 1, "mc": 7}


# ----------------------------------------------------------------- manifests


@dataclass(frozen=True)
class DeviceEntry:
    device_id: str
    track: str
    channels: int
    wav_paths: tuple[str, ...]

    def __post_init__(self):
        if self.track not in TRACK_CHANNELS:
            raise ConfigurationError(f"unknown track {self.track!r}, expected sc or mc")
        if self.channels != TRACK_CHANNELS[self.track]:
            raise ConfigurationError(
                f"device {self.device_id}: {self.track} entries must declare "
                f"{TRACK_CHANNELS[self.track]} channels, got {self.channels}")


@dataclass
class MeetingManifest:
    meeting_id: str
    devices: list[DeviceEntry]
    reference: str | None = None
    metadata: MeetingMetadata | None = None
    oracle_bundle: str | None = None
    root: Path = Path(".")

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def device(self, track: str) -> DeviceEntry:
        for dev in self.devices:
            if dev.track == track:
                return dev
        raise ConfigurationError(f"meeting {self.meeting_id} has no {track} device")

    @classmethod
    def from_dict(cls, rec: dict, root=Path(".")) -> "MeetingManifest":
        devices = []
        for d in rec.get("devices", []):
            paths = d.get("wav_paths") or [d["wav"]]
            devices.append(DeviceEntry(str(d.get("device_id", "")), d["track"],
                                       int(d["channels"]), tuple(paths)))
        meta = rec.get("metadata")
        if meta is not None:
            meta = MeetingMetadata(rec["meeting_id"], frozenset(meta.get("tags", [])),
                                   meta.get("device_id", ""), meta.get("track", ""))
        return cls(rec["meeting_id"], devices, rec.get("reference"), meta,
                   rec.get("oracle_bundle"), Path(root))


def load_meeting_manifests(path) -> list[MeetingManifest]:
    """JSON lines, one meeting per line; relative paths resolve next to the file."""
    path = Path(path)
    return [MeetingManifest.from_dict(json.loads(line), path.parent)
            for line in path.read_text().splitlines() if line.strip()]


def load_audio(manifest: MeetingManifest, track: str) -> Waveform:
    """Read the device audio for ``track``, checking its channel count."""
    dev = manifest.device(track)
    waves = [read_wav(manifest.resolve(p)) for p in dev.wav_paths]
    if len({w.sample_rate for w in waves}) != 1:
        raise InvalidInputError("device files disagree on sample rate")
    length = min(w.num_samples for w in waves)
    samples = np.concatenate([w.samples[:, :length] for w in waves], axis=0)
    if samples.shape[0] != dev.channels:
        raise ConfigurationError(
            f"meeting {manifest.meeting_id}: {track} track expects {dev.channels} "
            f"channel(s), audio has {samples.shape[0]}")
    return Waveform(samples, waves[0].sample_rate)


# ---------------------------------------------------------------------- ASR


@runtime_checkable
class AsrClient(Protocol):
    """Speech recognizer with word-level timestamps."""

    def transcribe(self, stream: Waveform) -> list[TimedWord]: ...


def fingerprint(stream: Waveform) -> str:
    """Content hash of a stream, used to key scripted transcripts."""
    h = hashlib.sha256()
    h.update(f"{stream.sample_rate}:{stream.samples.shape}".encode())
    h.update(np.ascontiguousarray(stream.samples, dtype=np.float32).tobytes())
    return h.hexdigest()


class MockAsr:
    """Plays back scripted word lists keyed by stream fingerprint."""

    concurrent_safe = True

    def __init__(self, script: Mapping[str, Sequence]):
        self.script = {k: [_as_timed_word(w) for w in v] for k, v in script.items()}

    def transcribe(self, stream: Waveform) -> list[TimedWord]:
        key = fingerprint(stream)
        if key not in self.script:
            warnings.warn(f"no scripted transcript for stream {key[:12]}", RuntimeWarning,
                          stacklevel=2)
            return []
        return list(self.script[key])


def mock_asr(script: Mapping[str, Sequence]) -> MockAsr:
    return MockAsr(script)


def _as_timed_word(w) -> TimedWord:
    if isinstance(w, TimedWord):
        return w
    if isinstance(w, Mapping):
        return TimedWord(str(w["text"]), float(w["start_s"]), float(w["end_s"]))
    text, start, end = w[:3]
    return TimedWord(str(text), float(start), float(end))


class HttpAsrClient:
    """POSTs a WAV body to an endpoint returning ``{"words": [...]}`` JSON."""

    def __init__(self, endpoint: str, timeout: float = 600.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.concurrent_safe = True

    def transcribe(self, stream: Waveform) -> list[TimedWord]:
        buf = io.BytesIO()
        write_wav(buf, stream)
        req = urllib.request.Request(self.endpoint, data=buf.getvalue(),
                                     headers={"Content-Type": "audio/wav"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise AsrError(f"ASR request to {self.endpoint} failed: {exc}") from exc
        words = sorted((_as_timed_word(w) for w in payload.get("words", [])),
                       key=lambda w: (w.start_s, w.end_s))
        return words


# ------------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    track: str = "sc"
    css: CssConfig = field(default_factory=CssConfig)
    window_s: float = 1.5
    hop_s: float = 0.75
    max_speakers: int = 8
    max_p: int = 30
    collar_s: float = 5.0
    segment_gap_s: float = 1.0
    seed: int = 0
    estimator: str = "oracle"
    oracle_shuffle_seed: int | None = None
    asr: str = "mock"
    asr_script: str | None = None
    workers: int = 1
    out_dir: str | None = None
    bootstrap_resamples: int = 10_000

    def __post_init__(self):
        if self.track not in TRACK_CHANNELS:
            raise ConfigurationError(f"unknown track {self.track!r}")
        mode = SINGLE_CHANNEL if self.track == "sc" else MULTI_CHANNEL
        if self.css.mode != mode:
            self.css = dataclasses.replace(self.css, mode=mode)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        css = dict(data.pop("css", {}) or {})
        if "stft" in css:
            css["stft"] = StftConfig(**css["stft"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        track = data.get("track", "sc")
        css.setdefault("mode", SINGLE_CHANNEL if track == "sc" else MULTI_CHANNEL)
        return cls(css=CssConfig(**css), **data)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib

            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)


# ----------------------------------------------------------------- meetings


@dataclass
class MeetingOutput:
    meeting_id: str
    hypothesis: TranscriptSet
    streams: list[Waveform]
    diarization: DiarizationOutput
    words: list[AttributedWord]


def words_to_segments(meeting_id: str, words: Sequence[AttributedWord],
                      gap_s: float = 1.0) -> TranscriptSet:
    """One segment per run of same-speaker words on a stream, split at long gaps."""
    segments = []
    by_stream: dict[int, list[AttributedWord]] = {}
    for w in words:
        by_stream.setdefault(w.stream, []).append(w)
    for stream in sorted(by_stream):
        run: list[AttributedWord] = []
        for w in sorted(by_stream[stream], key=lambda w: (w.start_s, w.end_s)):
            if run and (w.speaker != run[-1].speaker
                        or w.start_s - max(x.end_s for x in run) > gap_s):
                segments.append(_segment(run))
                run = []
            run.append(w)
        if run:
            segments.append(_segment(run))
    segments.sort(key=lambda s: (s.start_s, s.speaker))
    return TranscriptSet(meeting_id, segments)


def _segment(run):
    start = min(w.start_s for w in run)
    end = max(w.end_s for w in run)
    if end <= start:
        end = start + 1e-3
    return SegmentAnnotation(start, end, run[0].speaker, " ".join(w.text for w in run),
                             tuple((w.text, w.start_s, w.end_s) for w in run))


def process_meeting(manifest: MeetingManifest, cfg: PipelineConfig, estimator: MaskEstimator,
                    asr: AsrClient, embedder: SpeakerEmbedder | None = None) -> MeetingOutput:
    """CSS, ASR on each stream, joint diarization, word attribution."""
    mixture = load_audio(manifest, cfg.track)
    css = css_pipeline(mixture, estimator, cfg.css)
    words = []
    for k, stream in enumerate(css.streams):
        for w in asr.transcribe(stream):
            words.append((w.text, w.start_s, w.end_s, k))
    if cfg.out_dir:
        write_streams(css, Path(cfg.out_dir) / "streams", manifest.meeting_id)
    if not words:
        return MeetingOutput(manifest.meeting_id, TranscriptSet(manifest.meeting_id),
                             css.streams, DiarizationOutput(), [])
    diar = diarize_streams(css.streams, embedder or SpectralEmbedder(), cfg.window_s,
                           cfg.hop_s, None, cfg.max_speakers, cfg.seed, max_p=cfg.max_p)
    attributed = attribute_words(words, diar)
    hyp = words_to_segments(manifest.meeting_id, attributed, cfg.segment_gap_s)
    return MeetingOutput(manifest.meeting_id, hyp, css.streams, diar, attributed)


def run_meeting(manifest: MeetingManifest, cfg: PipelineConfig, estimator: MaskEstimator,
                asr: AsrClient, embedder: SpeakerEmbedder | None = None) -> TranscriptSet:
    return process_meeting(manifest, cfg, estimator, asr, embedder).hypothesis


# -------------------------------------------------------------------- batch


EstimatorFactory = Callable[[MeetingManifest, PipelineConfig], MaskEstimator]


def oracle_estimator_factory(manifest: MeetingManifest, cfg: PipelineConfig) -> MaskEstimator:
    if not manifest.oracle_bundle:
        raise ConfigurationError(f"meeting {manifest.meeting_id} has no oracle_bundle")
    bundle = read_bundle(manifest.resolve(manifest.oracle_bundle))
    return OracleIrmEstimator(bundle, cfg.css.stft, channel=cfg.css.ref_channel
                              if cfg.track == "mc" else 0, num_streams=cfg.css.num_streams,
                              shuffle_seed=cfg.oracle_shuffle_seed)


def load_estimator_factory(name: str) -> EstimatorFactory:
    """``oracle`` or an importable ``package.module:callable`` factory."""
    if name == "oracle":
        return oracle_estimator_factory
    module, _, attr = name.partition(":")
    if not attr:
        raise ConfigurationError(f"estimator must be 'oracle' or 'module:callable', got {name!r}")
    return getattr(importlib.import_module(module), attr)


def make_asr(cfg: PipelineConfig) -> AsrClient:
    if cfg.asr == "mock":
        script = json.loads(Path(cfg.asr_script).read_text()) if cfg.asr_script else {}
        return MockAsr(script)
    if cfg.asr == "external":
        endpoint = os.environ.get(ASR_ENDPOINT_ENV)
        if not endpoint:
            raise ConfigurationError(f"{ASR_ENDPOINT_ENV} is not set")
        return HttpAsrClient(endpoint)
    raise ConfigurationError(f"unknown ASR backend {cfg.asr!r}")


@dataclass
class BatchResult:
    hypotheses: dict[str, TranscriptSet]
    failures: dict[str, str]
    report: ScoreReport | None = None


def run_batch(manifests: Sequence[MeetingManifest], cfg: PipelineConfig,
              estimator_factory: EstimatorFactory | None = None, asr: AsrClient | None = None,
              embedder: SpeakerEmbedder | None = None) -> BatchResult:
    """Process meetings independently; failures are recorded, never fatal."""
    if not manifests:
        raise InvalidInputError("empty manifest list")
    factory = estimator_factory or load_estimator_factory(cfg.estimator)
    asr = asr or make_asr(cfg)

    def job(manifest):
        try:
            estimator = factory(manifest, cfg)
            return manifest.meeting_id, run_meeting(manifest, cfg, estimator, asr, embedder), None
        except Exception as exc:  # noqa: BLE001 - per-meeting isolation
            logger.warning("meeting %s failed: %s", manifest.meeting_id, exc)
            return manifest.meeting_id, None, f"{type(exc).__name__}: {exc}"

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(job, manifests))
    else:
        results = [job(m) for m in manifests]

    hyps = {mid: hyp for mid, hyp, err in results if hyp is not None}
    failures = {mid: err for mid, _, err in results if err is not None}

    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_transcripts(out / "hypothesis.jsonl", [hyps[m] for m in sorted(hyps)])

    refs, metadata = {}, []
    for m in manifests:
        if m.reference and m.meeting_id not in failures:
            try:
                refs.update({k: v for k, v in read_transcripts(m.resolve(m.reference)).items()
                             if k == m.meeting_id})
            except (OSError, ValueError) as exc:
                failures[m.meeting_id] = f"reference: {exc}"
                continue
        if m.metadata is not None:
            metadata.append(m.metadata)
    report = None
    if refs:
        report = build_report(hyps, refs, metadata, cfg.collar_s, cfg.seed,
                              cfg.bootstrap_resamples, failures)
        failures = report.failures
        if cfg.out_dir:
            report.write(cfg.out_dir)
    return BatchResult(hyps, failures, report)


def bundle_reference(bundle: SupervisionBundle, meeting_id: str,
                     gap_s: float = 1.0) -> TranscriptSet:
    """Reference transcript from a bundle's per-speaker word timings."""
    words = [AttributedWord(w["text"], w["start_s"], w["end_s"], f"speaker{i}", i)
             for i, spk in enumerate(bundle.transcripts) for w in spk]
    return words_to_segments(meeting_id, words, gap_s)
