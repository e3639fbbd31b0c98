"""Meeting transcription metrics.

tcpWER: words of each hypothesis speaker are aligned against words of each
reference speaker with a Levenshtein alignment in which a hypothesis word
may only match or substitute a reference word close to it in time; speakers
are then paired by a minimum-cost one-to-one assignment. The speaker-agnostic
rate pools all words of each side into one stream and uses the same
time-constrained alignment. Per-meeting rates are aggregated with percentile
bootstrap confidence intervals, overall and per metadata tag.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from dasr.errors import InvalidInputError, UndefinedRateError

DEFAULT_COLLAR = 5.0


@dataclass(frozen=True)
class TimedWord:
    text: str
    start_s: float
    end_s: float
    speaker: str | None = None


@dataclass(frozen=True)
class SegmentAnnotation:
    """One annotated segment: time span, speaker and words.

    ``words`` optionally carries word-level timings as
    ``((text, start_s, end_s), ...)``; otherwise ``transcript`` is used.
    """

    start_s: float
    end_s: float
    speaker: str
    transcript: str = ""
    words: tuple[tuple[str, float, float], ...] | None = None

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise InvalidInputError(
                f"segment start {self.start_s} must precede end {self.end_s}")


@dataclass
class TranscriptSet:
    meeting_id: str
    segments: list[SegmentAnnotation] = field(default_factory=list)

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})


@dataclass(frozen=True)
class MeetingMetadata:
    meeting_id: str
    tags: frozenset[str] = frozenset()
    device_id: str = ""
    track: str = "mc"


@dataclass(frozen=True)
class WerResult:
    errors: int
    length: int
    substitutions: int
    deletions: int
    insertions: int
    assignment: dict | None = None

    @property
    def error_rate(self) -> float | None:
        return self.errors / self.length if self.length else None


_STRIP = re.compile(r"[^\w'\-]", re.UNICODE)


def normalize_token(token: str) -> str:
    token = _STRIP.sub("", token.lower()).replace("_", "")
    return token.strip("'-")


def normalize_and_tokenize(segment: SegmentAnnotation) -> list[TimedWord]:
    """Normalized words with times.

    Word-level times are used when present; otherwise the segment span is
    divided among the tokens in proportion to their character counts.
    """
    if segment.words is not None:
        out = []
        for text, start, end in segment.words:
            for token in text.split():
                token = normalize_token(token)
                if token:
                    out.append(TimedWord(token, float(start), float(end), segment.speaker))
        return out
    tokens = [t for t in (normalize_token(t) for t in segment.transcript.split()) if t]
    if not tokens:
        return []
    lengths = np.array([len(t) for t in tokens], dtype=np.float64)
    edges = np.concatenate(([0.0], np.cumsum(lengths))) / lengths.sum()
    span = segment.end_s - segment.start_s
    times = segment.start_s + edges * span
    return [TimedWord(t, float(times[i]), float(times[i + 1]), segment.speaker)
            for i, t in enumerate(tokens)]


def transcript_words(ts: TranscriptSet) -> list[TimedWord]:
    return [w for seg in ts.segments for w in normalize_and_tokenize(seg)]


def _sorted(words):
    return sorted(words, key=lambda w: (w.start_s, w.end_s, w.text))


_INF = np.iinfo(np.int64).max // 4


def tc_word_distance(hyp: Sequence[TimedWord], ref: Sequence[TimedWord],
                     collar_s: float = DEFAULT_COLLAR) -> tuple[int, int, int]:
    """Time-constrained Levenshtein alignment, returns (S, D, I).

    Hypothesis word h may be matched with or substituted for reference word
    r only if [h.start - collar, h.end + collar] intersects [r.start, r.end].
    """
    n, m = len(ref), len(hyp)
    if n == 0 or m == 0:
        return 0, n, m
    r_start = np.array([w.start_s for w in ref])
    r_end = np.array([w.end_s for w in ref])
    h_start = np.array([w.start_s for w in hyp]) - collar_s
    h_end = np.array([w.end_s for w in hyp]) + collar_s
    vocab: dict[str, int] = {}
    r_ids = np.array([vocab.setdefault(w.text, len(vocab)) for w in ref])
    h_ids = np.array([vocab.setdefault(w.text, len(vocab)) for w in hyp])

    cols = np.arange(m + 1, dtype=np.int64)
    # cost[i, j]: best cost aligning ref[:i] with hyp[:j]
    cost = np.empty((n + 1, m + 1), dtype=np.int64)
    cost[0] = cols
    for i in range(1, n + 1):
        admissible = (h_start <= r_end[i - 1]) & (r_start[i - 1] <= h_end)
        sub = np.where(admissible, (h_ids != r_ids[i - 1]).astype(np.int64), _INF)
        prev = cost[i - 1]
        best = np.minimum(prev + 1, np.concatenate(([_INF], prev[:-1] + sub)))
        best[0] = i
        # insertions run left to right: row[j] = min_k<=j best[k] + (j - k)
        cost[i] = np.minimum.accumulate(best - cols) + cols

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            ok = h_start[j - 1] <= r_end[i - 1] and r_start[i - 1] <= h_end[j - 1]
            if ok:
                step = 0 if h_ids[j - 1] == r_ids[i - 1] else 1
                if cost[i, j] == cost[i - 1, j - 1] + step:
                    s += step
                    i, j = i - 1, j - 1
                    continue
        if i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, d, ins


def _by_speaker(words):
    streams: dict[str, list[TimedWord]] = {}
    for w in words:
        streams.setdefault(w.speaker, []).append(w)
    return {spk: _sorted(ws) for spk, ws in streams.items()}


def _result(counts, length, assignment=None):
    s, d, i = counts
    return WerResult(s + d + i, length, s, d, i, assignment)


def _check_rate(result):
    if result.length == 0:
        raise UndefinedRateError("reference contains no words", result)
    return result


def tcpwer(hyp: TranscriptSet, ref: TranscriptSet, collar_s: float = DEFAULT_COLLAR,
           strict: bool = True) -> WerResult:
    """Time-constrained minimum-permutation WER.

    The assignment maps hypothesis speaker to reference speaker; speakers
    left unpaired map to ``None``. With ``strict`` an empty reference raises
    :class:`UndefinedRateError` (the counts ride along on the exception).
    """
    hyp_streams = _by_speaker(transcript_words(hyp))
    ref_streams = _by_speaker(transcript_words(ref))
    return _tcpwer_streams(hyp_streams, ref_streams, collar_s, strict)


def _tcpwer_streams(hyp_streams, ref_streams, collar_s, strict=True):
    hyp_spk = sorted(hyp_streams, key=str)
    ref_spk = sorted(ref_streams, key=str)
    size = max(len(hyp_spk), len(ref_spk))
    length = sum(len(ws) for ws in ref_streams.values())
    if size == 0:
        result = _result((0, 0, 0), 0, {})
        return _check_rate(result) if strict else result
    counts = np.zeros((size, size, 3), dtype=np.int64)
    for a in range(size):
        h = hyp_streams[hyp_spk[a]] if a < len(hyp_spk) else []
        for b in range(size):
            r = ref_streams[ref_spk[b]] if b < len(ref_spk) else []
            counts[a, b] = tc_word_distance(h, r, collar_s)
    rows, cols = linear_sum_assignment(counts.sum(axis=-1))
    total = counts[rows, cols].sum(axis=0)
    assignment = {}
    for a, b in zip(rows, cols):
        if a < len(hyp_spk):
            assignment[hyp_spk[a]] = ref_spk[b] if b < len(ref_spk) else None
    result = _result(tuple(int(v) for v in total), length, assignment)
    return _check_rate(result) if strict else result


def speaker_agnostic_wer(hyp: TranscriptSet, ref: TranscriptSet,
                         collar_s: float = DEFAULT_COLLAR, strict: bool = True) -> WerResult:
    """Pooled single-stream WER with the same time constraint."""
    h = _sorted(transcript_words(hyp))
    r = _sorted(transcript_words(ref))
    result = _result(tc_word_distance(h, r, collar_s), len(r))
    return _check_rate(result) if strict else result


# ------------------------------------------------------- confidence intervals


def _bootstrap_means(values, resamples, seed):
    rng = np.random.default_rng(seed)
    n = len(values)
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // max(n, 1))
    for lo in range(0, resamples, chunk):
        hi = min(resamples, lo + chunk)
        idx = rng.integers(0, n, size=(hi - lo, n))
        means[lo:hi] = values[idx].mean(axis=1)
    return means


def confidence_interval(rates: Sequence[float], level: float = 0.95, resamples: int = 10_000,
                        seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap over meetings, returns ``(low, high, mean)``."""
    values = np.asarray(rates, dtype=np.float64)
    if values.size < 2:
        raise InvalidInputError("a confidence interval needs at least 2 meetings")
    if not 0 < level < 1:
        raise InvalidInputError("level must lie in (0, 1)")
    mean = float(values.mean())
    if np.all(values == values[0]):
        return float(values[0]), float(values[0]), float(values[0])
    means = _bootstrap_means(values, resamples, seed)
    alpha = (1 - level) / 2
    low, high = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high), mean


def relative_ci(system_rates: Mapping[str, float], baseline_rates: Mapping[str, float],
                level: float = 0.95, resamples: int = 10_000,
                seed: int = 0) -> tuple[float, float, float]:
    """Bootstrap interval of the mean per-meeting (system - baseline) difference."""
    if set(system_rates) != set(baseline_rates):
        missing = set(system_rates) ^ set(baseline_rates)
        raise InvalidInputError(f"meeting sets differ: {sorted(missing)[:5]}")
    ids = sorted(system_rates)
    diffs = [system_rates[m] - baseline_rates[m] for m in ids]
    return confidence_interval(diffs, level, resamples, seed)


# --------------------------------------------------------------- reporting


@dataclass
class MeetingScore:
    meeting_id: str
    tcpwer: WerResult
    agnostic: WerResult

    def row(self) -> dict:
        return {
            "meeting_id": self.meeting_id,
            "tcpwer": self.tcpwer.error_rate,
            "tcp_errors": self.tcpwer.errors,
            "tcp_substitutions": self.tcpwer.substitutions,
            "tcp_deletions": self.tcpwer.deletions,
            "tcp_insertions": self.tcpwer.insertions,
            "agnostic_wer": self.agnostic.error_rate,
            "agnostic_errors": self.agnostic.errors,
            "agnostic_substitutions": self.agnostic.substitutions,
            "agnostic_deletions": self.agnostic.deletions,
            "agnostic_insertions": self.agnostic.insertions,
            "ref_words": self.tcpwer.length,
        }


def score_meeting(hyp: TranscriptSet, ref: TranscriptSet,
                  collar_s: float = DEFAULT_COLLAR) -> MeetingScore:
    return MeetingScore(ref.meeting_id, tcpwer(hyp, ref, collar_s),
                        speaker_agnostic_wer(hyp, ref, collar_s))


def vertical_breakdown(scores: Sequence[MeetingScore], metadata: Sequence[MeetingMetadata],
                       metric: str = "tcpwer", level: float = 0.95, resamples: int = 10_000,
                       seed: int = 0) -> list[dict]:
    """Per-tag meeting count, mean rate and CI, plus an ``all`` row first."""
    meta = {m.meeting_id: m for m in metadata}
    missing = [s.meeting_id for s in scores if s.meeting_id not in meta]
    if missing:
        raise InvalidInputError(f"no metadata for meetings {missing[:5]}")

    def rate(s):
        return getattr(s, metric).error_rate

    groups: dict[str, list[float]] = {"all": [rate(s) for s in scores]}
    for s in scores:
        for tag in sorted(meta[s.meeting_id].tags):
            groups.setdefault(tag, []).append(rate(s))
    rows = []
    for tag in ["all"] + sorted(t for t in groups if t != "all"):
        values = groups[tag]
        row = {"tag": tag, "metric": metric, "meetings": len(values),
               "mean": float(np.mean(values)) if values else math.nan,
               "ci_low": None, "ci_high": None}
        if len(values) >= 2:
            row["ci_low"], row["ci_high"], _ = confidence_interval(values, level, resamples, seed)
        rows.append(row)
    return rows


@dataclass
class ScoreReport:
    meetings: list[MeetingScore]
    aggregates: dict
    verticals: list[dict] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meetings": [m.row() for m in self.meetings],
            "aggregates": self.aggregates,
            "verticals": self.verticals,
            "failures": self.failures,
        }

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / "report.json"
        report.write_text(json.dumps(self.to_json(), indent=2))
        per_meeting = out_dir / "meetings.csv"
        rows = [m.row() for m in self.meetings]
        with per_meeting.open("w", newline="") as fh:
            fields = list(rows[0]) if rows else ["meeting_id"]
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        verticals = out_dir / "verticals.csv"
        with verticals.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["tag", "metric", "meetings", "mean",
                                                    "ci_low", "ci_high"])
            writer.writeheader()
            writer.writerows(self.verticals)
        return [report, per_meeting, verticals]


def aggregate(scores: Sequence[MeetingScore], level: float = 0.95, resamples: int = 10_000,
              seed: int = 0) -> dict:
    """Macro-averaged rates with CIs, and pooled rates over all words."""
    out = {"meetings": len(scores)}
    for metric in ("tcpwer", "agnostic"):
        results = [getattr(s, metric) for s in scores]
        rates = [r.error_rate for r in results]
        entry = {"mean": float(np.mean(rates)) if rates else None, "ci_low": None,
                 "ci_high": None}
        if len(rates) >= 2:
            entry["ci_low"], entry["ci_high"], _ = confidence_interval(rates, level,
                                                                       resamples, seed)
        words = sum(r.length for r in results)
        entry["pooled"] = sum(r.errors for r in results) / words if words else None
        out[metric] = entry
    return out


def build_report(hyps: Mapping[str, TranscriptSet], refs: Mapping[str, TranscriptSet],
                 metadata: Sequence[MeetingMetadata] = (), collar_s: float = DEFAULT_COLLAR,
                 seed: int = 0, resamples: int = 10_000,
                 failures: Mapping[str, str] | None = None) -> ScoreReport:
    """Score every meeting that has a reference; absent hypotheses count as empty."""
    failures = dict(failures or {})
    scores = []
    for mid in sorted(refs):
        if mid in failures:
            continue
        hyp = hyps.get(mid, TranscriptSet(mid))
        try:
            scores.append(score_meeting(hyp, refs[mid], collar_s))
        except UndefinedRateError as exc:
            failures[mid] = str(exc)
    meta = [m for m in metadata if m.meeting_id in {s.meeting_id for s in scores}]
    verticals = []
    if meta and len(meta) == len(scores):
        for metric in ("tcpwer", "agnostic"):
            verticals += vertical_breakdown(scores, meta, metric, resamples=resamples, seed=seed)
    return ScoreReport(scores, aggregate(scores, resamples=resamples, seed=seed), verticals,
                       failures)


# ------------------------------------------------------------------- files


def read_transcripts(path) -> dict[str, TranscriptSet]:
    """JSON lines: ``{meeting_id, start_s, end_s, speaker, words | transcript}``."""
    out: dict[str, TranscriptSet] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        words = None
        if rec.get("words") is not None:
            words = tuple((w["text"], float(w["start_s"]), float(w["end_s"]))
                          for w in rec["words"])
        seg = SegmentAnnotation(float(rec["start_s"]), float(rec["end_s"]), str(rec["speaker"]),
                                rec.get("transcript", ""), words)
        out.setdefault(rec["meeting_id"], TranscriptSet(rec["meeting_id"])).segments.append(seg)
    return out


def write_transcripts(path, sets: Iterable[TranscriptSet]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for ts in sets:
            for seg in ts.segments:
                rec = {"meeting_id": ts.meeting_id, "start_s": seg.start_s, "end_s": seg.end_s,
                       "speaker": seg.speaker}
                if seg.words is not None:
                    rec["words"] = [{"text": t, "start_s": s, "end_s": e}
                                    for t, s, e in seg.words]
                else:
                    rec["transcript"] = seg.transcript
                fh.write(json.dumps(rec) + "\n")
    return path


def read_metadata(path) -> list[MeetingMetadata]:
    """JSON lines (or a JSON list) of ``{meeting_id, tags, device_id, track}``."""
    text = Path(path).read_text().strip()
    records = json.loads(text) if text.startswith("[") else [
        json.loads(line) for line in text.splitlines() if line.strip()]
    return [MeetingMetadata(r["meeting_id"], frozenset(r.get("tags", [])),
                            r.get("device_id", ""), r.get("track", "mc")) for r in records]


def metadata_dict(meta: MeetingMetadata) -> dict:
    out = asdict(meta)
    out["tags"] = sorted(meta.tags)
    return out
