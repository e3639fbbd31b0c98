"""Speaker labels for separated streams and per-word speaker attribution.

Embeddings from sliding windows of every stream are clustered jointly with
normalized maximum eigengap spectral clustering (NME-SC), so that a talker
who moves between streams keeps one label. Words are then attributed with
three rules: a single active speaker wins outright, with several active
speakers the one overlapping the word longest wins, and a word with no
active speaker inherits the label of the nearest attributed word.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
from sklearn.cluster import KMeans

from dasr.errors import InvalidInputError, UnattributableError
from dasr.signal import Waveform

logger = logging.getLogger(__name__)


@runtime_checkable
class SpeakerEmbedder(Protocol):
    def embed(self, window: Waveform) -> np.ndarray: ...


class SpectralEmbedder:
    """Long-term log spectrum of the louder frames, mean-removed.

    A model-free stand-in for a neural speaker embedding; adequate for
    talkers that differ in pitch and formant structure.
    """

    concurrent_safe = True

    def __init__(self, nfft: int = 512, max_hz: float = 4000.0, floor_db: float = -30.0):
        self.nfft = nfft
        self.max_hz = max_hz
        self.floor_db = floor_db

    def embed(self, window: Waveform) -> np.ndarray:
        x = window.samples[0]
        hop = self.nfft // 2
        if len(x) < self.nfft:
            x = np.pad(x, (0, self.nfft - len(x)))
        n = (len(x) - self.nfft) // hop + 1
        idx = np.arange(n)[:, None] * hop + np.arange(self.nfft)[None, :]
        frames = x[idx] * np.hanning(self.nfft)
        power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
        top = int(self.max_hz / window.sample_rate * self.nfft) + 1
        power = power[:, 1:top]
        energy = power.sum(axis=1)
        loud = energy >= energy.max() * 10 ** (self.floor_db / 10) if energy.max() > 0 else \
            np.ones(n, dtype=bool)
        spectrum = np.log10(power[loud].mean(axis=0) + 1e-10)
        spectrum -= spectrum.mean()
        norm = np.linalg.norm(spectrum)
        return spectrum / norm if norm > 0 else np.full_like(spectrum, 1 / np.sqrt(spectrum.size))


@dataclass(frozen=True)
class AttributedWord:
    text: str
    start_s: float
    end_s: float
    speaker: str
    stream: int


@dataclass
class DiarizationOutput:
    """Per stream, sorted ``(start_s, end_s, label)`` intervals."""

    streams: dict[int, list[tuple[float, float, str]]] = field(default_factory=dict)

    @property
    def labels(self) -> set[str]:
        return {lab for ivs in self.streams.values() for _, _, lab in ivs}

    def to_rttm(self, meeting_id: str) -> list[str]:
        lines = []
        for stream in sorted(self.streams):
            for start, end, label in self.streams[stream]:
                lines.append(f"SPEAKER {meeting_id} {stream} {start:.3f} "
                             f"{end - start:.3f} {label}")
        return lines

    @classmethod
    def from_rttm(cls, lines: Iterable[str]) -> "DiarizationOutput":
        out = cls()
        for line in lines:
            parts = line.split()
            if not parts or parts[0] != "SPEAKER":
                continue
            stream, start, dur, label = int(parts[2]), float(parts[3]), float(parts[4]), parts[5]
            out.streams.setdefault(stream, []).append((start, start + dur, label))
        for ivs in out.streams.values():
            ivs.sort()
        return out


def energy_vad(stream: Waveform, threshold_db: float = -40.0, hangover_ms: float = 300.0,
               frame_ms: float = 25.0, hop_ms: float = 10.0) -> list[tuple[float, float]]:
    """Speech intervals from frame power relative to the stream's loudest frame."""
    fs = stream.sample_rate
    frame = int(round(frame_ms * fs / 1000))
    hop = int(round(hop_ms * fs / 1000))
    x = stream.samples[0]
    if len(x) < frame:
        return []
    n = (len(x) - frame) // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(frame)[None, :]
    power = np.mean(x[idx] ** 2, axis=1)
    if power.max() <= 0:
        return []
    active = power > power.max() * 10 ** (threshold_db / 10)
    hang = int(round(hangover_ms / hop_ms))
    if hang:
        # extend each active run by the hangover
        trail = np.convolve(active.astype(int), np.ones(hang + 1, dtype=int))[:n]
        active = trail > 0
    edges = np.diff(np.concatenate(([0], active.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1
    return [(s * hop / fs, min(len(x), e * hop + frame) / fs) for s, e in zip(starts, stops)]


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def window_embeddings(stream: Waveform, embedder: SpeakerEmbedder, window_s: float = 1.5,
                      hop_s: float = 0.75, activity=None):
    """Embed sliding windows that intersect speech activity.

    ``activity`` is a list of ``(start_s, end_s)``; when omitted it comes
    from :func:`energy_vad`. Returns ``[((start_s, end_s), vector), ...]``.
    """
    if not window_s >= hop_s > 0:
        raise InvalidInputError("need window_s >= hop_s > 0")
    if activity is None:
        activity = energy_vad(stream)
    if not activity or stream.num_samples == 0:
        return []
    fs = stream.sample_rate
    win = int(round(window_s * fs))
    hop = int(round(hop_s * fs))
    if stream.num_samples < win:
        bounds = [(0, stream.num_samples)]
    else:
        count = (stream.num_samples - win) // hop + 1
        bounds = [(k * hop, k * hop + win) for k in range(count)]
    x = stream.samples[0]
    # windows 40 dB under the stream's mean power hold only roundoff; their
    # embedding is an arbitrary constant whose affinity row is all ties
    floor = np.mean(x ** 2) * 1e-4
    out = []
    for lo, hi in bounds:
        start, end = lo / fs, hi / fs
        if not any(_overlap(start, end, a, b) > 0 for a, b in activity):
            continue
        if np.mean(x[lo:hi] ** 2) <= floor:
            continue
        vec = np.asarray(embedder.embed(Waveform(stream.samples[:1, lo:hi], fs)),
                         dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm > 0 and abs(norm - 1) > 1e-6:
            vec = vec / norm
        out.append(((start, end), vec))
    return out


def _binarize(affinity, p):
    n = affinity.shape[0]
    order = np.argsort(-affinity, axis=1, kind="stable")[:, :p]
    graph = np.zeros_like(affinity)
    graph[np.arange(n)[:, None], order] = 1.0
    return np.maximum(graph, graph.T)


def _normalized_laplacian(graph):
    degree = graph.sum(axis=1)
    inv_sqrt = np.where(degree > 0, 1 / np.sqrt(np.maximum(degree, 1e-300)), 0.0)
    return np.eye(len(graph)) - inv_sqrt[:, None] * graph * inv_sqrt[None, :]


def nme_sc_cluster(embeddings, p_range: Sequence[int] | None = None, max_speakers: int = 8,
                   seed: int = 0, max_p: int = 30) -> tuple[np.ndarray, int]:
    """Spectral clustering with the speaker count picked by NME analysis.

    For each pruning level p the affinity keeps each row's p largest
    entries; the p whose eigengap ratio p / max gap is smallest is used,
    and the count is the position of that maximal gap. The default range
    starts at p = 3: each row's own similarity is always kept, so p = 2
    is a one-nearest-neighbour graph that splits into pairs.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n < 2:
        return np.zeros(n, dtype=int), 1
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    # rounding makes exact ties robust to tiny numerical noise
    affinity = np.round(np.clip(x @ x.T, -1.0, 1.0), 10)
    if p_range is None:
        p_range = range(3, min(max_p, n - 1) + 1)
    p_values = [p for p in p_range if 1 <= p <= n] or [max(1, n - 1)]
    kmax = max(1, min(max_speakers, n - 1))

    best = None
    for p in p_values:
        lap = _normalized_laplacian(_binarize(affinity, p))
        eigvals = np.linalg.eigvalsh(lap)
        gaps = np.diff(eigvals)[:kmax]
        top = gaps.max()
        ratio = p / top if top > 0 else np.inf
        if best is None or ratio < best[0]:
            best = (ratio, p, int(np.argmax(gaps)) + 1, lap)
    _, p_star, k_star, lap = best
    logger.debug("NME-SC: p*=%d, k*=%d", p_star, k_star)
    if k_star == 1:
        return np.zeros(n, dtype=int), 1

    _, vecs = np.linalg.eigh(lap)
    spectral = vecs[:, :k_star]
    spectral = spectral / np.maximum(np.linalg.norm(spectral, axis=1, keepdims=True), 1e-12)
    raw = KMeans(n_clusters=k_star, n_init=10, random_state=seed).fit_predict(spectral)
    return _relabel_by_first_occurrence(raw), k_star


def _relabel_by_first_occurrence(labels):
    mapping = {}
    for lab in labels:
        mapping.setdefault(lab, len(mapping))
    return np.array([mapping[lab] for lab in labels], dtype=int)


def intervals_from_labels(windows: Sequence[tuple[float, float, str]]):
    """Merge labelled windows into intervals, splitting overlaps at midpoints."""
    windows = list(windows)
    if not windows:
        return []
    pieces = []
    for i, (start, end, label) in enumerate(windows):
        lo, hi = start, end
        if i > 0 and windows[i - 1][1] > start:
            lo = 0.5 * (start + windows[i - 1][1])
        if i + 1 < len(windows) and windows[i + 1][0] < end:
            hi = 0.5 * (windows[i + 1][0] + end)
        pieces.append([lo, hi, label])
    merged = [pieces[0]]
    for lo, hi, label in pieces[1:]:
        last = merged[-1]
        if label == last[2] and lo <= last[1]:
            last[1] = max(last[1], hi)
        else:
            merged.append([lo, hi, label])
    return [tuple(m) for m in merged]


def diarize_streams(streams: Sequence[Waveform], embedder: SpeakerEmbedder,
                    window_s: float = 1.5, hop_s: float = 0.75,
                    p_range: Sequence[int] | None = None, max_speakers: int = 8,
                    seed: int = 0, activity: Sequence | None = None,
                    max_p: int = 30) -> DiarizationOutput:
    """Joint clustering over windows pooled from every stream."""
    per_stream = []
    for k, stream in enumerate(streams):
        act = activity[k] if activity is not None else None
        per_stream.append(window_embeddings(stream, embedder, window_s, hop_s, act))
    pooled = [vec for items in per_stream for _, vec in items]
    out = DiarizationOutput({k: [] for k in range(len(streams))})
    if not pooled:
        return out
    labels, _ = nme_sc_cluster(np.stack(pooled), p_range, max_speakers, seed, max_p)
    pos = 0
    for k, items in enumerate(per_stream):
        labelled = []
        for (start, end), _ in items:
            labelled.append((start, end, f"spk{labels[pos]}"))
            pos += 1
        out.streams[k] = intervals_from_labels(labelled)
    return out


def _word_fields(word):
    if isinstance(word, (tuple, list)):
        text, start, end, stream = word
        return str(text), float(start), float(end), int(stream)
    return str(word.text), float(word.start_s), float(word.end_s), int(word.stream)


def attribute_words(words, diar: DiarizationOutput) -> list[AttributedWord]:
    """Label every word from the diarization of its source stream.

    ``words`` holds ``(text, start_s, end_s, stream)`` tuples or objects
    with those attributes. Ties in overlap duration go to the interval that
    starts first; ties in distance for unanchored words go to the earlier
    anchor. Unanchored words look for anchors on their own stream first,
    then on any stream.
    """
    fields = [_word_fields(w) for w in words]
    labels: list[str | None] = []
    for text, start, end, stream in fields:
        totals: dict[str, float] = {}
        first_seen: dict[str, float] = {}
        for lo, hi, label in diar.streams.get(stream, []):
            ov = _overlap(start, end, lo, hi)
            touching = ov > 0 or (start == end and lo <= start <= hi)
            if touching:
                totals[label] = totals.get(label, 0.0) + ov
                first_seen.setdefault(label, lo)
        if not totals:
            labels.append(None)
        else:
            labels.append(max(totals, key=lambda lab: (totals[lab], -first_seen[lab])))

    anchors = [(0.5 * (f[1] + f[2]), f[1], f[3], lab) for f, lab in zip(fields, labels)
               if lab is not None]
    if len(anchors) < len(fields) and not anchors:
        raise UnattributableError("no word overlaps any diarized speaker")
    out = []
    for (text, start, end, stream), label in zip(fields, labels):
        if label is None:
            mid = 0.5 * (start + end)
            candidates = [a for a in anchors if a[2] == stream] or anchors
            # nearest midpoint, earlier word on ties
            label = min(candidates, key=lambda a: (abs(a[0] - mid), a[1]))[3]
        out.append(AttributedWord(text, start, end, label, stream))
    return out
