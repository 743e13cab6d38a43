import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airtime.dataset import air_time, intervals_to_tags, tags_from_string, tags_to_intervals
from airtime.metrics import (
    MetricDataError, SpanMatch, avg_edit_distance, edit_distance, evaluate, flight_length, frame_accuracy,
    levenshtein, macro_f1, match_spans, mean_error_percentage, per_label_f1,
)


@st.composite
def span_sets(draw, max_T=120):
    T = draw(st.integers(5, max_T))
    spans, t = [], draw(st.integers(0, 5))
    while draw(st.booleans()):
        length = draw(st.integers(3, 15))
        if t + length > T:
            break
        spans.append((t, t + length - 1))
        t += length + draw(st.integers(1, 10))
    return spans, T


# ----------------------------------------------------------------- accuracy


def test_accuracy_examples():
    gold = intervals_to_tags([(31, 40)], 100)
    assert frame_accuracy(gold, gold) == 100.0
    assert frame_accuracy(np.zeros(100, int), gold) == 90.0
    assert frame_accuracy(tags_from_string("OBIE"), tags_from_string("BIEO")) == 0.0


def test_length_mismatch_is_an_error():
    for fn in (frame_accuracy, macro_f1, edit_distance):
        with pytest.raises(MetricDataError):
            fn(np.zeros(5, int), np.zeros(6, int))
    with pytest.raises(MetricDataError):
        evaluate([np.zeros(3, int)], [np.zeros(3, int), np.zeros(3, int)])


def test_report_accuracy_is_frame_weighted():
    golds = [np.zeros(10, int), intervals_to_tags([(0, 4)], 90)]
    preds = [np.zeros(10, int), np.zeros(90, int)]
    rep = evaluate(preds, golds)
    assert rep.accuracy == pytest.approx(100 * 95 / 100)
    assert rep.video_mean_accuracy == pytest.approx((100 + 100 * 85 / 90) / 2)


# ------------------------------------------------------------------------ F1


def test_macro_f1_all_o_against_all_labels():
    gold = tags_from_string("OOOOOOBIIE")
    pred = np.zeros(10, int)
    # O: tp 6, predicted 10, gold 6 -> 12/16; B, I, E score zero
    assert per_label_f1(pred, gold) == {0: 0.75, 1: 0.0, 2: 0.0, 3: 0.0}
    assert macro_f1(pred, gold) == pytest.approx(0.75 / 4)
    assert macro_f1(pred, gold) < 0.25


def test_absent_labels_are_skipped():
    assert macro_f1(np.zeros(4, int), np.zeros(4, int)) == 1.0
    # only O and B appear: (F1_O + F1_B) / 2
    pred, gold = tags_from_string("OOBO"), tags_from_string("OOOO")
    assert macro_f1(pred, gold) == pytest.approx((2 * 3 / 7 + 0.0) / 2)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_macro_f1_is_one_exactly_when_identical(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    assert 0.0 <= macro_f1(a, b) <= 1.0
    assert (macro_f1(a, b) == 1.0) == bool(np.array_equal(a, b))


# ------------------------------------------------------------------ matching


def test_match_examples():
    assert match_spans([(31, 40)], [(31, 40)]) == [SpanMatch((31, 40), (31, 40), 10)]
    assert match_spans([(35, 45)], [(31, 40)]) == [SpanMatch((35, 45), (31, 40), 6)]
    assert match_spans([(50, 55)], [(31, 40)]) == [SpanMatch((50, 55), None, 0), SpanMatch(None, (31, 40), 0)]


def test_overlap_tie_goes_to_earlier_gold():
    (m,) = match_spans([(10, 19)], [(5, 14), (15, 24)])[:1]
    assert m.gold == (5, 14) and m.overlap == 5


def test_each_gold_matched_once():
    out = match_spans([(0, 9), (2, 8)], [(0, 9)])
    assert out[0].gold == (0, 9) and out[1].gold is None
    assert sum(m.matched for m in out) == 1


@given(span_sets(), span_sets())
def test_matching_is_one_to_one_with_positive_overlap(p, g):
    out = match_spans(p[0], g[0])
    matched = [m for m in out if m.matched]
    assert all(m.overlap >= 1 for m in matched)
    assert len({m.gold for m in matched}) == len(matched)
    assert [m.prediction for m in out if m.prediction is not None] == p[0]
    assert sorted(m.gold for m in out if m.gold is not None) == sorted(g[0])


# ------------------------------------------------------------- error percent


def test_error_percentage_examples():
    assert mean_error_percentage([SpanMatch((3, 12), (3, 12), 10)]) == 0.0
    assert mean_error_percentage([SpanMatch((0, 10), (0, 9), 10)]) == 12.5
    assert mean_error_percentage([SpanMatch((0, 10), (0, 9), 10), SpanMatch((20, 29), (20, 29), 10)]) == 6.25


def test_error_percentage_undefined_without_matches():
    assert mean_error_percentage([]) is None
    assert mean_error_percentage([SpanMatch((0, 5), None, 0)]) is None
    rep = evaluate([np.zeros(20, int)], [intervals_to_tags([(3, 9)], 20)])
    assert rep.mean_error_percentage is None and rep.n_overlapping == 0


@given(span_sets(), st.integers(0, 30), st.integers(0, 30))
def test_error_percentage_ignores_o_padding(spans, left, right):
    gold_spans, T = spans
    pred_spans = [(a, b - 1) if b - a >= 3 else (a, b) for a, b in gold_spans]  # drop one I frame where possible
    gold, pred = intervals_to_tags(gold_spans, T), intervals_to_tags(pred_spans, T)
    pad = lambda x: np.concatenate([np.zeros(left, int), x, np.zeros(right, int)])
    before = mean_error_percentage(match_spans(tags_to_intervals(pred), tags_to_intervals(gold)))
    after = mean_error_percentage(match_spans(tags_to_intervals(pad(pred)), tags_to_intervals(pad(gold))))
    assert before == after


def test_span_length_agrees_with_air_time():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(3, 120))
        a = int(rng.integers(0, T - 2))
        b = int(rng.integers(a + 2, T))
        fps = float(rng.choice([24.0, 25.0, 29.97, 30.0, 60.0]))
        (seconds,) = air_time(intervals_to_tags([(a, b)], T), fps)
        assert flight_length((a, b)) == round(seconds * fps)


# ------------------------------------------------------------- edit distance


def test_edit_distance_examples():
    x = intervals_to_tags([(31, 40)], 200)
    assert edit_distance(x, x) == 0
    assert edit_distance(tags_from_string("OOBIE"), tags_from_string("OBIIE")) == 2
    assert edit_distance(np.zeros(200, int), x) == 10
    assert avg_edit_distance([tags_from_string("OOBIE"), x], [tags_from_string("OBIIE"), x]) == 1.0


def test_levenshtein_insertions_and_deletions():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert levenshtein("OBIE", "OBE") == 1


@given(st.text("OBIE", max_size=12), st.text("OBIE", max_size=12), st.text("OBIE", max_size=12))
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)


# -------------------------------------------------------------------- report


@settings(max_examples=50)
@given(span_sets(), span_sets())
def test_report_invariants(p, g):
    T = min(p[1], g[1])
    ps = [s for s in p[0] if s[1] < T]
    gs = [s for s in g[0] if s[1] < T]
    rep = evaluate([intervals_to_tags(ps, T)], [intervals_to_tags(gs, T)])
    assert 0.0 <= rep.accuracy <= 100.0 and 0.0 <= rep.macro_f1 <= 1.0
    assert rep.n_overlapping <= rep.n_predictions == len(ps)


def test_report_table_and_json():
    gold = intervals_to_tags([(0, 9)], 20)
    rep = evaluate([intervals_to_tags([(0, 10)], 20)], [gold], ["v1"], ["Axel"])
    text = rep.table("demo")
    assert "Mean Error Percentage (%)" in text and "12.50" in text
    js = rep.to_json()
    assert js["per_video"][0]["video_id"] == "v1" and js["per_video"][0]["category"] == "Axel"
    assert "per_video" not in rep.to_json(include_videos=False)
