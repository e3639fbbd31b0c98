import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasr.errors import InvalidInputError, UndefinedRateError
from dasr.scoring import (
    MeetingMetadata,
    MeetingScore,
    SegmentAnnotation,
    TimedWord,
    TranscriptSet,
    WerResult,
    aggregate,
    build_report,
    confidence_interval,
    normalize_and_tokenize,
    read_metadata,
    read_transcripts,
    relative_ci,
    score_meeting,
    speaker_agnostic_wer,
    tc_word_distance,
    tcpwer,
    vertical_breakdown,
    write_transcripts,
)
from oracles import brute_force_tcp_errors, levenshtein_cost

VOCAB = list("abcde")


def words_at(text, start=0.0, step=1.0, speaker=None):
    return [TimedWord(t, start + k * step, start + k * step + 0.5, speaker)
            for k, t in enumerate(text.split())]


def transcript(mid, per_speaker):
    """{speaker: [TimedWord]} -> TranscriptSet with one word per segment."""
    segs = [SegmentAnnotation(w.start_s, max(w.end_s, w.start_s + 0.01), spk,
                              words=((w.text, w.start_s, w.end_s),))
            for spk, ws in per_speaker.items() for w in ws]
    return TranscriptSet(mid, segs)


timed_words = st.lists(
    st.tuples(st.sampled_from(VOCAB), st.floats(0, 30), st.floats(0, 3)),
    max_size=8,
).map(lambda xs: sorted((TimedWord(t, s, s + d) for t, s, d in xs),
                        key=lambda w: (w.start_s, w.end_s, w.text)))


# ------------------------------------------------------------------ normalization

def test_normalize_examples():
    words = normalize_and_tokenize(SegmentAnnotation(0, 2, "a", "Hello, world!"))
    assert [(w.text, w.start_s, w.end_s) for w in words] == [("hello", 0, 1), ("world", 1, 2)]
    assert normalize_and_tokenize(SegmentAnnotation(0, 1, "a", "")) == []
    assert [w.text for w in normalize_and_tokenize(
        SegmentAnnotation(0, 1, "a", "Don't STOP -- well-known."))] == \
        ["don't", "stop", "well-known"]


def test_character_proportional_times():
    words = normalize_and_tokenize(SegmentAnnotation(1, 5, "a", "ab abcdef"))
    assert words[0].end_s == pytest.approx(2.0)
    assert words[1].start_s == pytest.approx(2.0) and words[1].end_s == 5.0


def test_segment_requires_positive_span():
    with pytest.raises(InvalidInputError):
        SegmentAnnotation(2.0, 2.0, "a")


# ------------------------------------------------------------------ tc distance

def test_tc_distance_examples():
    ref = words_at("a b c")
    assert tc_word_distance(ref, ref) == (0, 0, 0)
    hyp = [w for w in ref if w.text != "b"]
    assert tc_word_distance(hyp, ref) == (0, 1, 0)
    shifted = words_at("a b c", start=30.0)
    assert tc_word_distance(shifted, ref, 5.0) == (0, 3, 3)
    assert tc_word_distance([], ref) == (0, 3, 0)
    assert tc_word_distance(ref, []) == (0, 0, 3)


def test_collar_boundary_is_inclusive():
    ref = [TimedWord("a", 10.0, 11.0)]
    assert tc_word_distance([TimedWord("a", 16.0, 16.5)], ref, 5.0) == (0, 0, 0)
    assert tc_word_distance([TimedWord("a", 16.01, 16.5)], ref, 5.0) == (0, 1, 1)


@settings(max_examples=200, deadline=None)
@given(timed_words, timed_words, st.sampled_from([0.0, 1.0, 5.0, math.inf]))
def test_tc_distance_matches_recursive_oracle(hyp, ref, collar):
    s, d, i = tc_word_distance(hyp, ref, collar)
    assert s + d + i == levenshtein_cost(hyp, ref, collar)
    # counts are consistent with the sequence lengths
    assert len(ref) - d == len(hyp) - i


@settings(max_examples=100, deadline=None)
@given(timed_words, timed_words)
def test_collar_monotone(hyp, ref):
    costs = [sum(tc_word_distance(hyp, ref, c)) for c in (0.0, 0.5, 2.0, 10.0, math.inf)]
    assert costs == sorted(costs, reverse=True)


# ------------------------------------------------------------------ tcpWER

def test_tcpwer_label_renaming_is_free():
    ref = {"A": words_at("a b c"), "B": words_at("d e", start=5)}
    hyp = {"x": [TimedWord(w.text, w.start_s, w.end_s) for w in ref["B"]],
           "y": [TimedWord(w.text, w.start_s, w.end_s) for w in ref["A"]]}
    res = tcpwer(transcript("m", hyp), transcript("m", ref))
    assert res.error_rate == 0.0
    assert res.assignment == {"x": "B", "y": "A"}


def test_tcpwer_merged_speakers():
    ref = {"A": words_at("a b c"), "B": words_at("d e", start=10)}
    hyp = {"x": ref["A"] + ref["B"]}
    res = tcpwer(transcript("m", hyp), transcript("m", ref))
    # x pairs with A; B's words become insertions on x and deletions on the padded stream
    assert (res.substitutions, res.deletions, res.insertions) == (0, 2, 2)
    assert res.error_rate == pytest.approx(4 / 5)
    assert res.assignment == {"x": "A"}


def test_tcpwer_empty_hypothesis_and_reference():
    ref = transcript("m", {"A": words_at("a b")})
    assert tcpwer(TranscriptSet("m"), ref).error_rate == 1.0
    assert speaker_agnostic_wer(TranscriptSet("m"), ref).error_rate == 1.0
    with pytest.raises(UndefinedRateError) as info:
        tcpwer(ref, TranscriptSet("m"))
    assert info.value.result.insertions == 2
    loose = tcpwer(ref, TranscriptSet("m"), strict=False)
    assert loose.error_rate is None and loose.errors == 2


def test_wrong_speakers_right_words():
    ref = {"A": words_at("a b c"), "B": words_at("d e f", start=0.2)}
    hyp = {"A": ref["A"][:2] + ref["B"][2:], "B": ref["B"][:2] + ref["A"][2:]}
    h, r = transcript("m", hyp), transcript("m", ref)
    assert tcpwer(h, r).error_rate > 0
    assert speaker_agnostic_wer(h, r).error_rate == 0


speaker_sets = st.dictionaries(st.sampled_from(["s1", "s2", "s3"]), timed_words, max_size=3)


@settings(max_examples=120, deadline=None)
@given(speaker_sets, speaker_sets, st.sampled_from([1.0, 5.0, math.inf]))
def test_tcpwer_matches_exhaustive_mapping(hyp, ref, collar):
    h = {k: [TimedWord(w.text, w.start_s, w.end_s, k) for w in v] for k, v in hyp.items()}
    r = {k: [TimedWord(w.text, w.start_s, w.end_s, k) for w in v] for k, v in ref.items()}
    from dasr.scoring import _tcpwer_streams

    res = _tcpwer_streams(h, r, collar, strict=False)
    assert res.errors == brute_force_tcp_errors(h, r, collar)


@settings(max_examples=60, deadline=None)
@given(speaker_sets, st.permutations(["p", "q", "r"]))
def test_tcpwer_identity_and_relabel_invariance(ref, names):
    if not any(ref.values()):
        return
    r = transcript("m", ref)
    assert tcpwer(r, r).errors == 0
    mapping = dict(zip(sorted(ref), names))
    relabelled = transcript("m", {mapping[k]: v for k, v in ref.items()})
    assert tcpwer(relabelled, r).errors == 0


@settings(max_examples=60, deadline=None)
@given(timed_words, st.lists(st.sampled_from(["s1", "s2"]), min_size=8, max_size=8),
       st.lists(st.sampled_from(["s1", "s2"]), min_size=8, max_size=8))
def test_agnostic_never_exceeds_tcpwer_on_same_words(words, hyp_spk, ref_spk):
    if not words:
        return
    h, r = {}, {}
    for w, a, b in zip(words, hyp_spk, ref_spk):
        h.setdefault(a, []).append(w)
        r.setdefault(b, []).append(w)
    ht, rt = transcript("m", h), transcript("m", r)
    assert speaker_agnostic_wer(ht, rt).errors == 0
    assert speaker_agnostic_wer(ht, rt).errors <= tcpwer(ht, rt).errors


# ------------------------------------------------------------------ bootstrap

def test_ci_degenerate_and_errors():
    assert confidence_interval([0.2] * 10) == (0.2, 0.2, 0.2)
    with pytest.raises(InvalidInputError):
        confidence_interval([0.1])
    with pytest.raises(InvalidInputError):
        confidence_interval([0.1, 0.2], level=1.0)


def test_ci_deterministic_and_brackets_mean():
    rates = np.random.default_rng(0).random(40)
    a = confidence_interval(rates, seed=3)
    assert a == confidence_interval(rates, seed=3)
    assert a[0] < a[2] < a[1]
    assert a[2] == pytest.approx(rates.mean())


def test_ci_width_shrinks_with_more_meetings():
    widths = []
    for n in (20, 100, 500):
        rates = [0.0, 1.0] * (n // 2)
        low, high, mean = confidence_interval(rates, resamples=4000, seed=1)
        assert mean == 0.5
        widths.append(high - low)
    assert widths[0] > widths[1] > widths[2]
    # normal approximation for a fair coin mean: 2 * 1.96 * 0.5 / sqrt(n)
    assert widths[1] == pytest.approx(2 * 1.96 * 0.5 / np.sqrt(100), rel=0.1)


def test_ci_matches_naive_bootstrap_distribution():
    values = list(np.random.default_rng(2).random(12))
    low, high, _ = confidence_interval(values, resamples=20000, seed=0)
    from oracles import percentile_bootstrap

    means = percentile_bootstrap(values, 4000, np.random.default_rng(9))
    ref_low, ref_high = np.percentile(means, [2.5, 97.5])
    assert low == pytest.approx(ref_low, abs=0.02)
    assert high == pytest.approx(ref_high, abs=0.02)


def test_relative_ci():
    sys_ = {"a": 0.3, "b": 0.2, "c": 0.4}
    assert relative_ci(sys_, sys_) == (0.0, 0.0, 0.0)
    base = {k: v + 0.05 for k, v in sys_.items()}
    low, high, mean = relative_ci(sys_, base)
    assert low == pytest.approx(-0.05) and high == pytest.approx(-0.05)
    rng = np.random.default_rng(4)
    s = {str(i): rng.random() for i in range(30)}
    b = {str(i): rng.random() for i in range(30)}
    low, high, mean = relative_ci(s, b)
    assert low <= mean <= high
    with pytest.raises(InvalidInputError):
        relative_ci({"a": 0.1}, {"b": 0.1})


# ------------------------------------------------------------------ reporting

def fake_score(mid, errors, length):
    r = WerResult(errors, length, errors, 0, 0)
    return MeetingScore(mid, r, r)


def test_vertical_breakdown_rows():
    scores = [fake_score("m1", 1, 10), fake_score("m2", 3, 10), fake_score("m3", 5, 10)]
    meta = [MeetingMetadata("m1", frozenset({"noisy"})),
            MeetingMetadata("m2", frozenset({"noisy"})),
            MeetingMetadata("m3", frozenset({"overlap"}))]
    rows = vertical_breakdown(scores, meta, resamples=500)
    assert [r["tag"] for r in rows] == ["all", "noisy", "overlap"]
    assert rows[0]["mean"] == pytest.approx(0.3)
    # count-weighted mean of disjoint tag means equals the overall mean
    assert (2 * rows[1]["mean"] + rows[2]["mean"]) / 3 == pytest.approx(rows[0]["mean"])
    assert rows[2]["ci_low"] is None and rows[2]["meetings"] == 1
    with pytest.raises(InvalidInputError):
        vertical_breakdown(scores, meta[:2])


def test_single_tag_row_equals_overall():
    scores = [fake_score(f"m{i}", i, 10) for i in range(5)]
    meta = [MeetingMetadata(f"m{i}", frozenset({"x"})) for i in range(5)]
    all_row, x_row = vertical_breakdown(scores, meta, resamples=500)
    assert {k: v for k, v in all_row.items() if k != "tag"} == \
        {k: v for k, v in x_row.items() if k != "tag"}


def test_aggregate_macro_and_pooled():
    agg = aggregate([fake_score("a", 1, 10), fake_score("b", 10, 20)], resamples=500)
    assert agg["tcpwer"]["mean"] == pytest.approx(0.3)
    assert agg["tcpwer"]["pooled"] == pytest.approx(11 / 30)


def test_transcript_and_metadata_files(tmp_path):
    ts = TranscriptSet("m1", [SegmentAnnotation(0, 2, "A", "hi there"),
                              SegmentAnnotation(1, 3, "B", words=(("yes", 1.0, 1.5),))])
    path = write_transcripts(tmp_path / "t.jsonl", [ts])
    back = read_transcripts(path)["m1"]
    assert back.segments == ts.segments
    meta = tmp_path / "meta.jsonl"
    meta.write_text(json.dumps({"meeting_id": "m1", "tags": ["noisy"], "track": "sc"}) + "\n")
    assert read_metadata(meta) == [MeetingMetadata("m1", frozenset({"noisy"}), "", "sc")]
    meta.write_text(json.dumps([{"meeting_id": "m2"}]))
    assert read_metadata(meta)[0].meeting_id == "m2"


def test_build_report_writes_outputs(tmp_path):
    refs = {f"m{i}": transcript(f"m{i}", {"A": words_at("a b c d")}) for i in range(3)}
    hyps = {"m0": refs["m0"], "m1": transcript("m1", {"z": words_at("a b")})}
    refs["empty"] = TranscriptSet("empty", [SegmentAnnotation(0, 1, "A", "")])
    meta = [MeetingMetadata(f"m{i}", frozenset({"t"})) for i in range(3)]
    report = build_report(hyps, refs, meta, resamples=200)
    rows = {m.meeting_id: m.row() for m in report.meetings}
    assert rows["m0"]["tcpwer"] == 0 and rows["m1"]["tcpwer"] == 0.5
    assert rows["m2"]["tcpwer"] == 1.0  # missing hypothesis scores as empty
    assert "empty" in report.failures
    paths = report.write(tmp_path)
    assert [p.name for p in paths] == ["report.json", "meetings.csv", "verticals.csv"]
    data = json.loads(paths[0].read_text())
    assert data["aggregates"]["meetings"] == 3
    assert len(data["verticals"]) == 4


def test_score_meeting_consistency():
    ref = transcript("m", {"A": words_at("a b c"), "B": words_at("d e", start=8)})
    hyp = transcript("m", {"x": words_at("a b x"), "y": words_at("d", start=8)})
    s = score_meeting(hyp, ref)
    assert s.tcpwer.errors == 2 and s.tcpwer.length == 5
    assert s.agnostic.errors <= s.tcpwer.errors
