"""Frame accuracy, macro F1, mean error percentage and edit distance.

A flight's length for the error percentage is its I-frame count
(``end - start - 1``), the same quantity that gives air time once divided by
fps. Predictions are paired with gold flights greedily by overlap size, one
to one, ties going to the earlier gold flight.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import LABELS, tags_to_intervals, tags_to_string


class MetricDataError(ValueError):
    pass


@dataclass(frozen=True)
class SpanMatch:
    prediction: tuple[int, int] | None
    gold: tuple[int, int] | None
    overlap: int = 0

    @property
    def matched(self) -> bool:
        return self.prediction is not None and self.gold is not None


def _check_lengths(pred, gold) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise MetricDataError(f"prediction has {pred.size} frames, gold has {gold.size}")
    return pred, gold


def frame_accuracy(pred, gold) -> float:
    pred, gold = _check_lengths(pred, gold)
    if pred.size == 0:
        raise MetricDataError("empty sequences")
    return 100.0 * float(np.mean(pred == gold))


def per_label_f1(pred, gold, n_labels: int = 4) -> dict[int, float]:
    """F1 for each label occurring in ``pred`` or ``gold``."""
    pred, gold = _check_lengths(pred, gold)
    out = {}
    for label in range(n_labels):
        p, g = pred == label, gold == label
        if not p.any() and not g.any():
            continue
        tp = float(np.sum(p & g))
        out[label] = 2.0 * tp / (p.sum() + g.sum())
    return out


def macro_f1(pred, gold, n_labels: int = 4) -> float:
    """Unweighted mean of per-label F1; labels absent from both sides are skipped."""
    scores = per_label_f1(pred, gold, n_labels)
    return float(np.mean(list(scores.values()))) if scores else 1.0


def _as_pair(span) -> tuple[int, int]:
    return (int(span[0]), int(span[1])) if isinstance(span, tuple) else (int(span.start), int(span.end))


def match_spans(pred_spans, gold_spans) -> list[SpanMatch]:
    """Pair predictions with gold flights by largest overlap, one to one.

    Returns one entry per prediction (in order), followed by unmatched gold
    flights as ``SpanMatch(None, gold, 0)``.
    """
    preds = [_as_pair(s) for s in pred_spans]
    golds = [_as_pair(s) for s in gold_spans]
    pairs = []
    for i, (ps, pe) in enumerate(preds):
        for j, (gs, ge) in enumerate(golds):
            ov = min(pe, ge) - max(ps, gs) + 1
            if ov >= 1:
                pairs.append((-ov, j, i))
    pairs.sort()
    pred_to_gold: dict[int, tuple[int, int]] = {}
    used_gold: set[int] = set()
    for neg_ov, j, i in pairs:
        if i in pred_to_gold or j in used_gold:
            continue
        pred_to_gold[i] = (j, -neg_ov)
        used_gold.add(j)
    out = []
    for i, p in enumerate(preds):
        if i in pred_to_gold:
            j, ov = pred_to_gold[i]
            out.append(SpanMatch(p, golds[j], ov))
        else:
            out.append(SpanMatch(p, None, 0))
    out.extend(SpanMatch(None, g, 0) for j, g in enumerate(golds) if j not in used_gold)
    return out


def flight_length(span: tuple[int, int]) -> int:
    """I-frame count of a span."""
    return max(span[1] - span[0] - 1, 0)


def mean_error_percentage(matches: Sequence[SpanMatch]) -> float | None:
    """Mean |len(pred) - len(gold)| / len(gold) * 100 over matched predictions; None if none matched."""
    errors = [
        abs(flight_length(m.prediction) - flight_length(m.gold)) / flight_length(m.gold) * 100.0
        for m in matches
        if m.matched
    ]
    return float(np.mean(errors)) if errors else None


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_distance(pred, gold) -> int:
    pred, gold = _check_lengths(pred, gold)
    return levenshtein(tags_to_string(pred), tags_to_string(gold))


def avg_edit_distance(preds: Sequence, golds: Sequence) -> float:
    if len(preds) != len(golds) or not preds:
        raise MetricDataError("need one prediction per gold sequence and at least one video")
    return float(np.mean([edit_distance(p, g) for p, g in zip(preds, golds)]))


# ------------------------------------------------------------------- report


@dataclass
class VideoScore:
    video_id: str
    category: str
    frames: int
    accuracy: float
    edit_distance: int
    matches: list[SpanMatch]
    predicted: str = ""

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "category": self.category,
            "frames": self.frames,
            "accuracy": self.accuracy,
            "edit_distance": self.edit_distance,
            "matches": [asdict(m) for m in self.matches],
            "predicted": self.predicted,
        }


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    mean_error_percentage: float | None
    avg_edit_distance: float
    n_overlapping: int
    n_predictions: int
    n_videos: int
    video_mean_accuracy: float
    per_label_f1: dict[str, float] = field(default_factory=dict)
    per_video: list[VideoScore] = field(default_factory=list)

    def to_json(self, include_videos: bool = True) -> dict:
        out = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mean_error_percentage": self.mean_error_percentage,
            "avg_edit_distance": self.avg_edit_distance,
            "n_overlapping": self.n_overlapping,
            "n_predictions": self.n_predictions,
            "n_videos": self.n_videos,
            "video_mean_accuracy": self.video_mean_accuracy,
            "per_label_f1": self.per_label_f1,
        }
        if include_videos:
            out["per_video"] = [v.to_json() for v in self.per_video]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self, title: str = "") -> str:
        err = "n/a" if self.mean_error_percentage is None else f"{self.mean_error_percentage:.2f}"
        rows = [
            ("Accuracy (%)", f"{self.accuracy:.1f}"),
            ("F1-score", f"{self.macro_f1:.3f}"),
            ("Mean Error Percentage (%)", err),
            ("Edit Distance", f"{self.avg_edit_distance:.3f}"),
            ("Overlapping predictions", f"{self.n_overlapping}/{self.n_predictions}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [title] if title else []
        lines += [f"{name:<{width}}  {value:>10}" for name, value in rows]
        return "\n".join(lines)


def evaluate(preds: Sequence, golds: Sequence, video_ids: Sequence[str] | None = None,
             categories: Sequence[str] | None = None) -> MetricsReport:
    """Score predicted tag sequences against gold ones, video by video."""
    if len(preds) != len(golds) or not golds:
        raise MetricDataError("need one prediction per gold sequence and at least one video")
    video_ids = list(video_ids) if video_ids is not None else [str(i) for i in range(len(golds))]
    categories = list(categories) if categories is not None else [""] * len(golds)
    per_video = []
    all_matches: list[SpanMatch] = []
    for p, g, vid, cat in zip(preds, golds, video_ids, categories):
        p, g = _check_lengths(p, g)
        matches = match_spans(tags_to_intervals(p), tags_to_intervals(g))
        all_matches += matches
        per_video.append(VideoScore(vid, cat, int(g.size), frame_accuracy(p, g), edit_distance(p, g),
                                    matches, tags_to_string(p)))
    flat_p = np.concatenate([np.asarray(p) for p in preds])
    flat_g = np.concatenate([np.asarray(g) for g in golds])
    label_f1 = per_label_f1(flat_p, flat_g)
    return MetricsReport(
        accuracy=frame_accuracy(flat_p, flat_g),
        macro_f1=macro_f1(flat_p, flat_g),
        mean_error_percentage=mean_error_percentage(all_matches),
        avg_edit_distance=float(np.mean([v.edit_distance for v in per_video])),
        n_overlapping=sum(m.matched for m in all_matches),
        n_predictions=sum(m.prediction is not None for m in all_matches),
        n_videos=len(per_video),
        video_mean_accuracy=float(np.mean([v.accuracy for v in per_video])),
        per_label_f1={LABELS[k]: v for k, v in label_f1.items()},
        per_video=per_video,
    )
