"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 share module-scoped training runs; criterion 8 repeats them and
compares loss histories and reports byte for byte.
"""

import itertools
import json
import time

import numpy as np
import pytest

from airtime import numerics as nx
from airtime.dataset import (
    FlightSpan, air_time, intervals_to_tags, is_valid_tags, split_records, tags_to_intervals, tags_from_string,
)
from airtime.embedding import build_partitions
from airtime.inference import evaluate_model
from airtime.metrics import (
    SpanMatch, avg_edit_distance, edit_distance, frame_accuracy, macro_f1, match_spans, mean_error_percentage,
)
from airtime.model import (
    ALLOWED, AirTimeModel, Batch, ModelConfig, crf_log_partition, crf_score, masked_transitions, viterbi_decode,
)
from airtime.synthetic import SynthConfig, generate_synthetic
from airtime.training import TrainConfig, fine_tune, train

# ------------------------------------------------------------------ oracles


def all_paths(T: int, k: int = 4) -> np.ndarray:
    return np.array(list(itertools.product(range(k), repeat=T)), dtype=np.int64)


def brute_scores(C: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Score of every one of the k^T paths: start + emissions + transitions + stop, grouped as path scores are."""
    T, k = C.shape
    P = all_paths(T, k)
    emissions = C[np.arange(T), P].sum(axis=1)
    moves = A[P[:, :-1], P[:, 1:]].sum(axis=1)
    return A[k, P[:, 0]] + emissions + moves + A[P[:, -1], k + 1]


def brute_log_sum(scores: np.ndarray) -> float:
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def dp_levenshtein(a: str, b: str) -> int:
    """Full-table edit distance, independent of the library's two-row version."""
    D = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    D[:, 0] = np.arange(len(a) + 1)
    D[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i, j] = min(D[i - 1, j] + 1, D[i, j - 1] + 1, D[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(D[-1, -1])


# ------------------------------------------------------------ criterion 1-4


def test_criterion_1_crf_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_logz, viterbi_exact, n = 0.0, 0, 200
    for i in range(n):
        T = int(rng.integers(1, 9))
        C = rng.normal(0, 2, size=(T, 4))
        raw = rng.normal(0, 1, size=(6, 6))
        A = masked_transitions(raw) if i % 2 else raw
        scores = brute_scores(C, A)
        worst_logz = max(worst_logz, abs(crf_log_partition(C, A) - brute_log_sum(scores)))
        path = viterbi_decode(C, A)
        viterbi_exact += path.score == scores.max() and crf_score(C, path.y, A) == scores.max()
    elapsed = time.perf_counter() - start
    ok = worst_logz <= 1e-9 and viterbi_exact == n and elapsed < 30
    assert verdict(1, "CRF oracle equivalence", ok,
                   f"max |logZ - brute| = {worst_logz:.2e} (<= 1e-9), Viterbi exact {viterbi_exact}/{n}, "
                   f"{elapsed:.1f} s (< 30 s)")


def test_criterion_2_gradient_fidelity(verdict):
    start = time.perf_counter()
    cfg = ModelConfig(H=16, heads=4, dropout=0.1)
    model = AirTimeModel.initialize(cfg, 5)
    rng = np.random.default_rng(9)
    for p in model.parameters():
        p.tensor.data += rng.normal(0, 0.05, size=p.tensor.shape)
    T = 12
    poses = rng.normal(0, 1, size=(1, T, 17, 2))
    tags = intervals_to_tags([(2, 6), (8, 11)], T)[None]
    batch = Batch(["toy"], np.ones((1, T), bool), poses, build_partitions(poses), tags=tags)

    def loss_value() -> float:
        return float(model.loss(batch).data)

    model.zero_grad()
    nx.backward(model.loss(batch))
    coords = []
    for p in model.parameters():
        flat = [idx for idx in np.ndindex(p.tensor.shape)
                if p.name != "transitions" or ALLOWED[idx]]
        picks = rng.choice(len(flat), size=min(len(flat), 8), replace=False)
        coords += [(p, flat[j]) for j in picks]
    worst = 0.0
    for p, idx in coords:
        h = 1e-5
        old = p.tensor.data[idx]
        p.tensor.data[idx] = old + h
        up = loss_value()
        p.tensor.data[idx] = old - h
        down = loss_value()
        p.tensor.data[idx] = old
        num = (up - down) / (2 * h)
        rel = abs(p.grad[idx] - num) / max(abs(p.grad[idx]), abs(num), 1e-6)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = len(coords) >= 200 and worst <= 1e-4 and elapsed < 120
    assert verdict(2, "gradient fidelity", ok,
                   f"{len(coords)} coordinates over {len(model.params)} tensors, max relative error {worst:.2e} "
                   f"(<= 1e-4), {elapsed:.1f} s (< 120 s)")


def test_criterion_3_grammar_safety(verdict):
    rng = np.random.default_rng(77)
    valid = 0
    n = 10_000
    for i in range(n):
        if i % 100 == 0:
            A = masked_transitions(rng.normal(0, 3, size=(6, 6)))
        T = int(rng.integers(1, 41))
        y = viterbi_decode(rng.normal(0, 5, size=(T, 4)), A).y
        valid += is_valid_tags(y) and y[0] in (0, 1) and y[-1] in (0, 3)
    assert verdict(3, "grammar safety", valid == n, f"{valid}/{n} Viterbi paths follow O->B->I->E->O")


def test_criterion_4_codec_and_metric_oracles(verdict):
    rng = np.random.default_rng(4)
    round_trips = 0
    for _ in range(1000):
        T = int(rng.integers(1, 200))
        spans, t = [], int(rng.integers(0, 10))
        while True:
            length = int(rng.integers(3, 20))
            if t + length > T or rng.random() < 0.2:
                break
            spans.append(FlightSpan(t, t + length - 1))
            t += length + int(rng.integers(1, 15))
        tags = intervals_to_tags(spans, T)
        round_trips += tags_to_intervals(tags) == spans and np.array_equal(
            intervals_to_tags(tags_to_intervals(tags), T), tags)
    one = mean_error_percentage([SpanMatch((0, 10), (0, 9), 10)])  # I-counts 9 vs 8
    two = mean_error_percentage([SpanMatch((0, 10), (0, 9), 10), SpanMatch((20, 29), (20, 29), 10)])
    ed_examples = [edit_distance(tags_from_string("OOBIE"), tags_from_string("OBIIE")),
                   edit_distance(np.zeros(200, int), intervals_to_tags([(31, 40)], 200))]
    pairs = []
    for _ in range(150):
        n = int(rng.integers(0, 15))
        pairs.append(tuple("".join(rng.choice(list("OBIE"), size=n)) for _ in range(2)))
    dp_agree = sum(edit_distance(tags_from_string(a), tags_from_string(b)) == dp_levenshtein(a, b) for a, b in pairs)
    seconds = air_time(intervals_to_tags([(31, 40)], 200), 30.0)
    ok = (round_trips == 1000 and one == 12.5 and two == 6.25 and ed_examples == [2, 10]
          and dp_agree == 150 and len(seconds) == 1 and round(seconds[0], 4) == 0.2667)
    assert verdict(4, "codec and metric oracles", ok,
                   f"round trips {round_trips}/1000, error % {one} and {two} (12.5, 6.25), "
                   f"edit distances {ed_examples} ([2, 10]), DP agreement {dp_agree}/150, "
                   f"air time {seconds[0]:.4f} s (0.2667)")


# --------------------------------------------------------- criteria 5 to 8

DETECTION_DATA = SynthConfig(n_videos=250)
SINGLE_DATA = SynthConfig(n_videos=60, flights_per_video=(1,), flight_weights=(1.0,))
MULTI_DATA = SynthConfig(n_videos=60, flights_per_video=(2, 3), flight_weights=(0.6, 0.4))
DETECTION_TRAIN = TrainConfig(batch_size=16, lr=1e-3, epochs=30, seed=0)

# three rotation classes; more revolutions need more air time
CLASS_DATA = SynthConfig(n_videos=240, flights_per_video=(1,), flight_weights=(1.0,),
                         bucket_flight_frames=((9, 11), (12, 14), (15, 17)))
CLASS_TRAIN = TrainConfig(batch_size=16, lr=1e-3, epochs=80, seed=0, head="classification")
TARGET = 0.95


def detection_run():
    records = generate_synthetic(DETECTION_DATA, seed=1)
    train_set, test_set = split_records(records, seed=0)
    start = time.perf_counter()
    ckpt = train(train_set, DETECTION_TRAIN, ModelConfig(H=64))
    elapsed = time.perf_counter() - start
    model = ckpt.to_model()
    return {
        "checkpoint": ckpt,
        "seconds": elapsed,
        "n_train": len(train_set),
        "test": evaluate_model(model, test_set),
        "single": evaluate_model(model, generate_synthetic(SINGLE_DATA, seed=5)),
        "multi": evaluate_model(model, generate_synthetic(MULTI_DATA, seed=6)),
    }


def finetune_run(detection_ckpt):
    records = generate_synthetic(CLASS_DATA, seed=21)
    train_set, val_set = split_records(records, seed=0)
    names = sorted({r.category for r in records})
    tuned = fine_tune(detection_ckpt, train_set, CLASS_TRAIN, val_records=val_set, class_names=names,
                      stop_at_val_accuracy=TARGET)
    scratch = train(train_set, CLASS_TRAIN, ModelConfig(H=64), val_records=val_set, class_names=names,
                    stop_at_val_accuracy=TARGET)
    return {"tuned": tuned, "scratch": scratch}


def epochs_to_target(ckpt, target: float = TARGET) -> int | None:
    for i, acc in enumerate(ckpt.extras["val_accuracy"]):
        if acc >= target:
            return i + 1
    return None


@pytest.fixture(scope="module")
def detection():
    return detection_run()


@pytest.fixture(scope="module")
def transfer(detection):
    return finetune_run(detection["checkpoint"])


def test_criterion_5_synthetic_end_to_end(verdict, detection):
    rep = detection["test"]
    ok = (rep.accuracy >= 90.0 and rep.mean_error_percentage is not None and rep.mean_error_percentage <= 30.0
          and detection["seconds"] <= 15 * 60 and detection["n_train"] == 200 and rep.n_videos == 50)
    print(rep.table("held-out synthetic test set"))
    assert verdict(5, "synthetic end-to-end", ok,
                   f"accuracy {rep.accuracy:.1f}% (>= 90), mean error {rep.mean_error_percentage:.2f}% (<= 30), "
                   f"F1 {rep.macro_f1:.3f}, edit distance {rep.avg_edit_distance:.2f}, "
                   f"trained on {detection['n_train']} videos in {detection['seconds']:.0f} s (<= 900)")


def test_criterion_6_multi_jump_degradation(verdict, detection):
    single, multi = detection["single"].mean_error_percentage, detection["multi"].mean_error_percentage
    ok = single is not None and multi is not None and multi > single
    assert verdict(6, "single vs multi-jump", ok,
                   f"mean error single {single:.2f}% < multi {multi:.2f}% "
                   f"(accuracy {detection['single'].accuracy:.1f}% vs {detection['multi'].accuracy:.1f}%)")


def test_criterion_7_fine_tuning_proxy(verdict, transfer):
    tuned, scratch = epochs_to_target(transfer["tuned"]), epochs_to_target(transfer["scratch"])
    budget = CLASS_TRAIN.epochs
    if scratch is None:
        # not reached within the budget: from-scratch needs more than `budget` epochs
        ok = tuned is not None and tuned <= budget / 2
        scratch_text = f"> {budget} (best {max(transfer['scratch'].extras['val_accuracy']):.2f})"
    else:
        ok = tuned is not None and tuned <= scratch / 2
        scratch_text = str(scratch)
    context = "; ".join(
        f"{k}: best {max(transfer[k].extras['val_accuracy']):.3f}, first >= 0.85 at epoch {epochs_to_target(transfer[k], 0.85)}"
        for k in ("tuned", "scratch")
    )
    assert verdict(7, "fine-tuning proxy", ok,
                   f"epochs to {TARGET:.0%} validation accuracy: fine-tuned {tuned}, from scratch {scratch_text} "
                   f"(needs fine-tuned <= half; {context})")


def test_criterion_8_determinism(verdict, detection, transfer):
    again = detection_run()
    again_transfer = finetune_run(again["checkpoint"])
    same_hist = again["checkpoint"].loss_history == detection["checkpoint"].loss_history
    same_params = all(again["checkpoint"].params[k].tobytes() == v.tobytes()
                      for k, v in detection["checkpoint"].params.items())
    same_reports = all(again[k].dumps() == detection[k].dumps() for k in ("test", "single", "multi"))
    same_transfer = all(
        again_transfer[k].loss_history == transfer[k].loss_history
        and json.dumps(again_transfer[k].extras, sort_keys=True) == json.dumps(transfer[k].extras, sort_keys=True)
        for k in ("tuned", "scratch")
    )
    ok = same_hist and same_params and same_reports and same_transfer
    assert verdict(8, "determinism", ok,
                   f"loss histories {'identical' if same_hist else 'differ'}, parameters "
                   f"{'identical' if same_params else 'differ'}, reports {'identical' if same_reports else 'differ'}, "
                   f"fine-tuning runs {'identical' if same_transfer else 'differ'}")
