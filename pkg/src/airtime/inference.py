"""Run a trained tagger over records: tags, flights with air times, reports."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import VideoRecord, air_time, tag_runs, I
from .embedding import FixedEmbeddingTable
from .metrics import MetricsReport, evaluate
from .model import AirTimeModel
from .training import make_batches, prepare


def predict_tags(model: AirTimeModel, records: Sequence[VideoRecord], batch_size: int = 16,
                 table: FixedEmbeddingTable | None = None) -> list[np.ndarray]:
    """Viterbi tag sequence for every record, in input order."""
    items = prepare(records, model.config, max_len=max(len(r) for r in records), table=table)
    out: list[np.ndarray] = []
    for batch in make_batches(items, batch_size):
        out.extend(model.decode(batch))
    return out


def flights_with_air_time(tags: np.ndarray, fps: float) -> list[dict]:
    """One entry per predicted run: span, I-frame count and seconds in the air."""
    seconds = air_time(tags, fps)
    return [
        {"start": a, "end": b, "in_air_frames": int(np.sum(tags[a : b + 1] == I)), "air_time": sec}
        for (a, b), sec in zip(tag_runs(tags), seconds)
    ]


def evaluate_model(model: AirTimeModel, records: Sequence[VideoRecord], batch_size: int = 16,
                   table: FixedEmbeddingTable | None = None) -> MetricsReport:
    preds = predict_tags(model, records, batch_size, table)
    return evaluate(preds, [r.tags() for r in records], [r.video_id for r in records],
                    [r.category for r in records])
